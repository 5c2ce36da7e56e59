"""From-scratch transformer encoder over numpy arrays.

Pre-layer-norm residual blocks, learned positions, GELU feed-forward, and a
token-prediction head tied to the input embedding. Forward returns an
explicit cache; `backward` consumes it and accumulates parameter gradients
in place, so several loss heads can merge their dH contributions before a
single backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DataError

LN_EPS = 1e-5
MASK_BIAS = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 64
    dropout_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.max_len < 6:
            raise ConfigError("max_len must fit [CLS] a [SEP] [MASK] b [SEP]")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0,1)")
        if self.vocab_size < 6:
            raise ConfigError("vocab_size must exceed the special tokens")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "dropout_p": self.dropout_p,
            "seed": self.seed,
        }


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + f"attn.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[p + f"attn.{name}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ff.w1"] = (d, ff)
        shapes[p + "ff.b1"] = (ff,)
        shapes[p + "ff.w2"] = (ff, d)
        shapes[p + "ff.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["mlm_bias"] = (v,)
    return shapes


def param_count(cfg: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: EncoderConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Scaled-normal weights (std 0.02), zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".g",)):
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape).astype(dtype)
    return params


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _dropout(x, p, rng):
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


@dataclass
class _LayerCache:
    ln1: tuple
    ln1_out: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ctx_merged: np.ndarray
    attn_dropmask: np.ndarray | None
    ln2: tuple
    ln2_out: np.ndarray
    ff_pre: np.ndarray
    ff_act: np.ndarray
    ff_dropmask: np.ndarray | None


@dataclass
class Cache:
    ids: np.ndarray
    attn: np.ndarray
    emb_dropmask: np.ndarray | None
    layers: list[_LayerCache] = field(default_factory=list)
    lnf: tuple = ()
    shape: tuple[int, int] = (0, 0)


def forward(
    params: dict[str, np.ndarray],
    cfg: EncoderConfig,
    ids: np.ndarray,
    attn: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, Cache]:
    """Contextual representations H of shape (batch, length, d_model).

    ``attn`` marks real tokens with 1; padded keys receive zero attention
    weight. Eval mode (train=False) applies no dropout and is deterministic.
    """
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise DataError("token id out of vocabulary range")
    b, l = ids.shape
    if l > cfg.max_len:
        raise DataError(f"sequence length {l} exceeds max_len={cfg.max_len}")
    drop = train and cfg.dropout_p > 0.0
    if drop and rng is None:
        raise ConfigError("training forward with dropout requires an rng")
    dtype = params["tok_emb"].dtype
    scale = 1.0 / np.sqrt(cfg.d_head)

    x = params["tok_emb"][ids] + params["pos_emb"][:l]
    emb_mask = None
    if drop:
        x, emb_mask = _dropout(x, cfg.dropout_p, rng)
    cache = Cache(ids=ids, attn=attn, emb_dropmask=emb_mask, shape=(b, l))

    key_bias = ((1.0 - attn) * MASK_BIAS).astype(dtype)[:, None, None, :]
    for i in range(cfg.n_layers):
        p = params
        pre = f"layers.{i}."
        y, xhat1, istd1 = kernels.layer_norm_fwd(
            x.reshape(b * l, -1), p[pre + "ln1.g"], p[pre + "ln1.b"], LN_EPS
        )
        q = _split_heads((y @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(b, l, -1), cfg.n_heads)
        k = _split_heads((y @ p[pre + "attn.wk"] + p[pre + "attn.bk"]).reshape(b, l, -1), cfg.n_heads)
        v = _split_heads((y @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(b, l, -1), cfg.n_heads)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale + key_bias
        probs = kernels.softmax_fwd(scores.reshape(-1, l)).reshape(scores.shape)
        ctx = _merge_heads(np.matmul(probs, v))
        attn_out = ctx @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
        attn_mask_drop = None
        if drop:
            attn_out, attn_mask_drop = _dropout(attn_out, cfg.dropout_p, rng)
        x1 = x + attn_out

        y2, xhat2, istd2 = kernels.layer_norm_fwd(
            x1.reshape(b * l, -1), p[pre + "ln2.g"], p[pre + "ln2.b"], LN_EPS
        )
        ff_pre = y2 @ p[pre + "ff.w1"] + p[pre + "ff.b1"]
        ff_act = kernels.gelu_fwd(ff_pre)
        ff_out = (ff_act @ p[pre + "ff.w2"] + p[pre + "ff.b2"]).reshape(b, l, -1)
        ff_mask_drop = None
        if drop:
            ff_out, ff_mask_drop = _dropout(ff_out, cfg.dropout_p, rng)
        x = x1 + ff_out

        cache.layers.append(
            _LayerCache(
                ln1=(xhat1, istd1),
                ln1_out=y,
                q=q,
                k=k,
                v=v,
                probs=probs,
                ctx_merged=ctx,
                attn_dropmask=attn_mask_drop,
                ln2=(xhat2, istd2),
                ln2_out=y2,
                ff_pre=ff_pre,
                ff_act=ff_act,
                ff_dropmask=ff_mask_drop,
            )
        )

    h2d, xhatf, istdf = kernels.layer_norm_fwd(
        x.reshape(b * l, -1), params["ln_f.g"], params["ln_f.b"], LN_EPS
    )
    cache.lnf = (xhatf, istdf)
    return h2d.reshape(b, l, -1), cache


def backward(
    params: dict[str, np.ndarray],
    cfg: EncoderConfig,
    cache: Cache,
    dH: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate dLoss/dparams into ``grads`` given dLoss/dH."""
    b, l = cache.shape
    scale = 1.0 / np.sqrt(cfg.d_head)

    xhatf, istdf = cache.lnf
    dx2d, dg, db = kernels.layer_norm_bwd(
        dH.reshape(b * l, -1), xhatf, istdf, params["ln_f.g"]
    )
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db
    dx = dx2d.reshape(b, l, -1)

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        lc = cache.layers[i]

        dff_out = dx
        if lc.ff_dropmask is not None:
            dff_out = dff_out * lc.ff_dropmask
        dff2d = dff_out.reshape(b * l, -1)
        grads[p + "ff.w2"] += lc.ff_act.T @ dff2d
        grads[p + "ff.b2"] += dff2d.sum(axis=0)
        dff_act = dff2d @ params[p + "ff.w2"].T
        dff_pre = kernels.gelu_bwd(lc.ff_pre, dff_act)
        grads[p + "ff.w1"] += lc.ln2_out.T @ dff_pre
        grads[p + "ff.b1"] += dff_pre.sum(axis=0)
        dy2 = dff_pre @ params[p + "ff.w1"].T
        xhat2, istd2 = lc.ln2
        dx1_2d, dg2, db2 = kernels.layer_norm_bwd(dy2, xhat2, istd2, params[p + "ln2.g"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dx1 = dx + dx1_2d.reshape(b, l, -1)

        dattn_out = dx1
        if lc.attn_dropmask is not None:
            dattn_out = dattn_out * lc.attn_dropmask
        da2d = dattn_out.reshape(b * l, -1)
        grads[p + "attn.wo"] += lc.ctx_merged.reshape(b * l, -1).T @ da2d
        grads[p + "attn.bo"] += da2d.sum(axis=0)
        dctx = _split_heads((da2d @ params[p + "attn.wo"].T).reshape(b, l, -1), cfg.n_heads)
        dprobs = np.matmul(dctx, lc.v.transpose(0, 1, 3, 2))
        dv = np.matmul(lc.probs.transpose(0, 1, 3, 2), dctx)
        dscores = kernels.softmax_bwd(
            lc.probs.reshape(-1, l), dprobs.reshape(-1, l)
        ).reshape(dprobs.shape)
        dq = np.matmul(dscores, lc.k) * scale
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), lc.q) * scale

        dq2d = _merge_heads(dq).reshape(b * l, -1)
        dk2d = _merge_heads(dk).reshape(b * l, -1)
        dv2d = _merge_heads(dv).reshape(b * l, -1)
        y = lc.ln1_out
        grads[p + "attn.wq"] += y.T @ dq2d
        grads[p + "attn.bq"] += dq2d.sum(axis=0)
        grads[p + "attn.wk"] += y.T @ dk2d
        grads[p + "attn.bk"] += dk2d.sum(axis=0)
        grads[p + "attn.wv"] += y.T @ dv2d
        grads[p + "attn.bv"] += dv2d.sum(axis=0)
        dy = (
            dq2d @ params[p + "attn.wq"].T
            + dk2d @ params[p + "attn.wk"].T
            + dv2d @ params[p + "attn.wv"].T
        )
        xhat1, istd1 = lc.ln1
        dx_2d, dg1, db1 = kernels.layer_norm_bwd(dy, xhat1, istd1, params[p + "ln1.g"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dx = dx1 + dx_2d.reshape(b, l, -1)

    if cache.emb_dropmask is not None:
        dx = dx * cache.emb_dropmask
    dx2d = dx.reshape(b * l, -1)
    kernels.embedding_bwd(cache.ids.reshape(-1), dx2d, grads["tok_emb"])
    grads["pos_emb"][:l] += dx.sum(axis=0)


def mlm_logits(params: dict[str, np.ndarray], h_rows: np.ndarray) -> np.ndarray:
    """Token logits for selected positions through the tied embedding."""
    return h_rows @ params["tok_emb"].T + params["mlm_bias"]


def mlm_logits_bwd(
    params: dict[str, np.ndarray],
    h_rows: np.ndarray,
    dlogits: np.ndarray,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    """Accumulate head grads; return dLoss/dh_rows."""
    grads["tok_emb"] += dlogits.T @ h_rows
    grads["mlm_bias"] += dlogits.sum(axis=0)
    return dlogits @ params["tok_emb"]


def gather_rows(H: np.ndarray, inst_idx: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return H[inst_idx, positions]


def scatter_rows(dH: np.ndarray, inst_idx: np.ndarray, positions: np.ndarray, rows: np.ndarray) -> None:
    np.add.at(dH, (inst_idx, positions), rows)
