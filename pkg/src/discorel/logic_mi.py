"""Global-context representation learning by mutual-information maximization.

A single-query multi-head cross attention (MHCA) pools both argument spans
into one vector, a small ReLU network scores (pooled, slot) pairs, and a
Jensen-Shannon lower bound on their mutual information is maximized.
Negatives pair each pooled vector with the slot vector of a different
instance via an in-batch derangement, which is product-distributed when
instances are i.i.d.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .encoder import MASK_BIAS
from .errors import DataError


# ---------------------------------------------------------------- parameters

def init_mi_params(
    d_model: int, n_heads: int, seed: int = 0, dtype=np.float32
) -> dict[str, np.ndarray]:
    if d_model % n_heads != 0:
        raise DataError(f"d_model={d_model} not divisible by mhca heads={n_heads}")
    rng = np.random.default_rng(seed)
    d = d_model

    def w(*shape):
        return rng.normal(0.0, 0.02, size=shape).astype(dtype)

    params = {}
    for name in ("wq", "wk", "wv", "wo"):
        params[f"mhca.{name}"] = w(d, d)
    for name in ("bq", "bk", "bv", "bo"):
        params[f"mhca.{name}"] = np.zeros(d, dtype=dtype)
    params["disc.w1"] = w(2 * d, d)
    params["disc.b1"] = np.zeros(d, dtype=dtype)
    params["disc.w2"] = w(d, d)
    params["disc.b2"] = np.zeros(d, dtype=dtype)
    params["disc.w3"] = w(d, 1)
    params["disc.b3"] = np.zeros(1, dtype=dtype)
    return params


# ---------------------------------------------------------------------- MHCA

def mhca(
    params: dict[str, np.ndarray],
    n_heads: int,
    q_vec: np.ndarray,  # (B, d) slot representations
    kv: np.ndarray,  # (B, Lk, d) padded concatenation of the two spans
    kv_mask: np.ndarray,  # (B, Lk) 1 for real rows
):
    """Single-query multi-head cross attention. Returns (out, cache)."""
    if kv_mask.sum() == 0 or (kv_mask.sum(axis=1) == 0).any():
        raise DataError("mhca requires at least one key per instance")
    b, lk, d = kv.shape
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    dtype = q_vec.dtype

    qh = (q_vec @ params["mhca.wq"] + params["mhca.bq"]).reshape(b, n_heads, dh)
    k2d = (kv.reshape(b * lk, d) @ params["mhca.wk"] + params["mhca.bk"])
    v2d = (kv.reshape(b * lk, d) @ params["mhca.wv"] + params["mhca.bv"])
    kh = k2d.reshape(b, lk, n_heads, dh).transpose(0, 2, 1, 3)  # (B,h,Lk,dh)
    vh = v2d.reshape(b, lk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = np.einsum("bhd,bhld->bhl", qh, kh) * scale
    scores = scores + ((1.0 - kv_mask) * MASK_BIAS).astype(dtype)[:, None, :]
    probs = kernels.softmax_fwd(scores.reshape(b * n_heads, lk)).reshape(b, n_heads, lk)
    ctx = np.einsum("bhl,bhld->bhd", probs, vh).reshape(b, d)
    out = ctx @ params["mhca.wo"] + params["mhca.bo"]
    cache = (q_vec, kv, kv_mask, qh, kh, vh, probs, ctx)
    return out, cache


def mhca_bwd(
    params: dict[str, np.ndarray],
    n_heads: int,
    cache,
    dout: np.ndarray,
    grads: dict[str, np.ndarray],
):
    """Returns (dq_vec, dkv)."""
    q_vec, kv, kv_mask, qh, kh, vh, probs, ctx = cache
    b, lk, d = kv.shape
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)

    grads["mhca.wo"] += ctx.T @ dout
    grads["mhca.bo"] += dout.sum(axis=0)
    dctx = (dout @ params["mhca.wo"].T).reshape(b, n_heads, dh)
    dprobs = np.einsum("bhd,bhld->bhl", dctx, vh)
    dvh = np.einsum("bhl,bhd->bhld", probs, dctx)
    dscores = kernels.softmax_bwd(
        probs.reshape(b * n_heads, lk), dprobs.reshape(b * n_heads, lk)
    ).reshape(b, n_heads, lk)
    dqh = np.einsum("bhl,bhld->bhd", dscores, kh) * scale
    dkh = np.einsum("bhl,bhd->bhld", dscores, qh) * scale

    dq2d = dqh.reshape(b, d)
    grads["mhca.wq"] += q_vec.T @ dq2d
    grads["mhca.bq"] += dq2d.sum(axis=0)
    dq_vec = dq2d @ params["mhca.wq"].T

    dk2d = dkh.transpose(0, 2, 1, 3).reshape(b * lk, d)
    dv2d = dvh.transpose(0, 2, 1, 3).reshape(b * lk, d)
    kv2d = kv.reshape(b * lk, d)
    grads["mhca.wk"] += kv2d.T @ dk2d
    grads["mhca.bk"] += dk2d.sum(axis=0)
    grads["mhca.wv"] += kv2d.T @ dv2d
    grads["mhca.bv"] += dv2d.sum(axis=0)
    dkv = (dk2d @ params["mhca.wk"].T + dv2d @ params["mhca.wv"].T).reshape(b, lk, d)
    return dq_vec, dkv


# ------------------------------------------------------------- discriminator

def discriminate(params: dict[str, np.ndarray], h_pooled: np.ndarray, h_slot: np.ndarray):
    """Pair score through three affine layers with ReLU between. (scores, cache)."""
    x = np.concatenate([h_pooled, h_slot], axis=1)
    z1 = x @ params["disc.w1"] + params["disc.b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params["disc.w2"] + params["disc.b2"]
    a2 = np.maximum(z2, 0.0)
    s = (a2 @ params["disc.w3"] + params["disc.b3"]).reshape(-1)
    return s, (x, z1, a1, z2, a2)


def discriminate_bwd(params, cache, dscores: np.ndarray, grads: dict[str, np.ndarray]):
    """Returns (dh_pooled, dh_slot)."""
    x, z1, a1, z2, a2 = cache
    d = x.shape[1] // 2
    ds = dscores.reshape(-1, 1)
    grads["disc.w3"] += a2.T @ ds
    grads["disc.b3"] += ds.sum(axis=0)
    da2 = ds @ params["disc.w3"].T
    dz2 = da2 * (z2 > 0)
    grads["disc.w2"] += a1.T @ dz2
    grads["disc.b2"] += dz2.sum(axis=0)
    da1 = dz2 @ params["disc.w2"].T
    dz1 = da1 * (z1 > 0)
    grads["disc.w1"] += x.T @ dz1
    grads["disc.b1"] += dz1.sum(axis=0)
    dx = dz1 @ params["disc.w1"].T
    return dx[:, :d], dx[:, d:]


# ------------------------------------------------------------- JSD estimator

def softplus(z):
    """log(1 + e^z), computed stably for large |z|."""
    z = np.asarray(z, dtype=float)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def jsd_estimate(pos_scores, neg_scores) -> float:
    """mean(-softplus(-pos)) - mean(softplus(neg)); always <= 0."""
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise DataError("jsd_estimate requires non-empty score lists")
    return float(-softplus(-pos).mean() - softplus(neg).mean())


def jsd_estimate_grads(pos_scores, neg_scores):
    """(d est/d pos, d est/d neg) for the mean-based estimate above."""
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    return sigmoid(-pos) / pos.size, -sigmoid(neg) / neg.size


def sample_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform fixed-point-free permutation by rejection sampling."""
    if n < 2:
        raise DataError("a derangement needs at least 2 elements")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not (perm == idx).any():
            return perm


# ---------------------------------------------------------------- GLSL loss

def build_kv(H: np.ndarray, arg1_spans: np.ndarray, arg2_spans: np.ndarray):
    """Pack both spans of each instance into a padded KV block.

    Returns (kv (B,Lk,d), kv_mask (B,Lk), src_pos (B,Lk) int positions into
    H's length axis, -1 on padding) so gradients can scatter back.
    """
    b, _, d = H.shape
    lens = (arg1_spans[:, 1] - arg1_spans[:, 0]) + (arg2_spans[:, 1] - arg2_spans[:, 0])
    lk = int(lens.max())
    kv = np.zeros((b, lk, d), dtype=H.dtype)
    kv_mask = np.zeros((b, lk), dtype=H.dtype)
    src_pos = np.full((b, lk), -1, dtype=np.int64)
    for i in range(b):
        pos = np.concatenate(
            [
                np.arange(arg1_spans[i, 0], arg1_spans[i, 1]),
                np.arange(arg2_spans[i, 0], arg2_spans[i, 1]),
            ]
        )
        kv[i, : len(pos)] = H[i, pos]
        kv_mask[i, : len(pos)] = 1.0
        src_pos[i, : len(pos)] = pos
    return kv, kv_mask, src_pos


def glsl_loss(
    mi_params: dict[str, np.ndarray],
    n_heads: int,
    H: np.ndarray,
    cmask_pos: np.ndarray,
    arg1_spans: np.ndarray,
    arg2_spans: np.ndarray,
    rng: np.random.Generator,
    grads_mi: dict[str, np.ndarray] | None = None,
    dH: np.ndarray | None = None,
    detach_encoder: bool = False,
) -> float:
    """Negated JSD lower bound over (pooled-context, slot) pairs.

    Positives pair each instance with itself; negatives use a uniformly
    drawn derangement. When ``grads_mi``/``dH`` are given, gradients flow
    into the MHCA, the discriminator, and (unless ``detach_encoder``) the
    encoder through both the slot vector and the span representations.
    """
    b = H.shape[0]
    if b < 2:
        raise DataError("the MI loss needs batch size >= 2 for a negative pair")
    rows = np.arange(b)
    h_cmask = H[rows, cmask_pos]
    kv, kv_mask, src_pos = build_kv(H, arg1_spans, arg2_spans)
    h_glogic, mhca_cache = mhca(mi_params, n_heads, h_cmask, kv, kv_mask)
    sigma = sample_derangement(b, rng)
    pos_scores, cache_p = discriminate(mi_params, h_glogic, h_cmask)
    neg_scores, cache_n = discriminate(mi_params, h_glogic[sigma], h_cmask)
    est = jsd_estimate(pos_scores, neg_scores)
    loss = -est

    if grads_mi is None:
        return loss

    dest_pos, dest_neg = jsd_estimate_grads(pos_scores, neg_scores)
    dpos = (-dest_pos).astype(H.dtype)  # d loss = -d est
    dneg = (-dest_neg).astype(H.dtype)
    da_p, db_p = discriminate_bwd(mi_params, cache_p, dpos, grads_mi)
    da_n, db_n = discriminate_bwd(mi_params, cache_n, dneg, grads_mi)
    dh_glogic = da_p.copy()
    np.add.at(dh_glogic, sigma, da_n)
    dh_cmask = db_p + db_n
    dq_vec, dkv = mhca_bwd(mi_params, n_heads, mhca_cache, dh_glogic, grads_mi)
    dh_cmask += dq_vec

    if dH is not None and not detach_encoder:
        np.add.at(dH, (rows, cmask_pos), dh_cmask)
        for i in range(b):
            pos = src_pos[i]
            real = pos >= 0
            np.add.at(dH[i], pos[real], dkv[i, real])
    return loss


# ----------------------------------------------------- estimator calibration

def jsd_exact_grid(score_table: np.ndarray, joint: np.ndarray) -> float:
    """Exact JSD estimate for a discrete pair distribution and score table."""
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    product = np.outer(px, py)
    return float(
        (joint * (-softplus(-score_table))).sum() - (product * softplus(score_table)).sum()
    )


def coupled_grid_oracle(k: int = 8, off_score: float = -80.0) -> tuple[float, np.ndarray]:
    """Supremum of the estimate for X=Y uniform over k symbols.

    The optimal per-pair score is log(joint/product) on the support and
    -inf elsewhere; evaluates the estimate exactly on the k x k grid.
    """
    joint = np.eye(k) / k
    table = np.full((k, k), off_score)
    np.fill_diagonal(table, np.log(k))
    return jsd_exact_grid(table, joint), table


def _disc_grid_scores(params, k: int, embed_dim: int) -> np.ndarray:
    eye = np.eye(k, dtype=params["disc.w1"].dtype)
    emb = np.zeros((k, embed_dim), dtype=eye.dtype)
    emb[:, :k] = eye
    xs = np.repeat(emb, k, axis=0)
    ys = np.tile(emb, (k, 1))
    scores, _ = discriminate(params, xs, ys)
    return scores.reshape(k, k)


def train_jsd_coupled(
    k: int = 8,
    embed_dim: int = 24,
    steps: int = 1500,
    batch: int = 512,
    lr: float = 5e-3,
    seed: int = 0,
) -> float:
    """Train the discriminator on perfectly coupled one-hot pairs.

    Returns the exact grid evaluation of the trained scores, comparable to
    ``coupled_grid_oracle(k)``.
    """
    from .optim import AdamW

    rng = np.random.default_rng(seed)
    params = init_mi_params(embed_dim, 1, seed=seed, dtype=np.float64)
    disc = {kk: v for kk, v in params.items() if kk.startswith("disc.")}
    opt = AdamW(disc)
    emb = np.zeros((k, embed_dim))
    emb[:, :k] = np.eye(k)
    for _ in range(steps):
        sym = rng.integers(0, k, size=batch)
        x = emb[sym]
        sigma = sample_derangement(batch, rng)
        pos, cache_p = discriminate(disc, x, x)
        neg, cache_n = discriminate(disc, x[sigma], x)
        dest_pos, dest_neg = jsd_estimate_grads(pos, neg)
        grads = {kk: np.zeros_like(v) for kk, v in disc.items()}
        discriminate_bwd(disc, cache_p, -dest_pos, grads)
        discriminate_bwd(disc, cache_n, -dest_neg, grads)
        opt.step(disc, grads, lr)
    joint = np.eye(k) / k
    return jsd_exact_grid(_disc_grid_scores(disc, k, embed_dim), joint)


def train_jsd_independent(
    dim: int = 8,
    steps: int = 600,
    batch: int = 512,
    lr: float = 3e-3,
    seed: int = 0,
    eval_n: int = 50_000,
) -> float:
    """Train on independent Gaussian pairs; the supremum is -2*ln(2).

    Returns the estimate on a large held-out sample.
    """
    from .optim import AdamW

    rng = np.random.default_rng(seed)
    params = init_mi_params(dim, 1, seed=seed, dtype=np.float64)
    disc = {kk: v for kk, v in params.items() if kk.startswith("disc.")}
    opt = AdamW(disc)
    for _ in range(steps):
        x = rng.normal(size=(batch, dim))
        y = rng.normal(size=(batch, dim))
        sigma = sample_derangement(batch, rng)
        pos, cache_p = discriminate(disc, x, y)
        neg, cache_n = discriminate(disc, x[sigma], y)
        dest_pos, dest_neg = jsd_estimate_grads(pos, neg)
        grads = {kk: np.zeros_like(v) for kk, v in disc.items()}
        discriminate_bwd(disc, cache_p, -dest_pos, grads)
        discriminate_bwd(disc, cache_n, -dest_neg, grads)
        opt.step(disc, grads, lr)
    x = rng.normal(size=(eval_n, dim))
    y = rng.normal(size=(eval_n, dim))
    sigma = sample_derangement(eval_n, rng)
    pos, _ = discriminate(disc, x, y)
    neg, _ = discriminate(disc, x[sigma], y)
    return jsd_estimate(pos, neg)
