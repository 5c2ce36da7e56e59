"""Single entry point: ``discorel <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback

from . import __version__, commands
from .errors import DiscorelError


class _Parser(argparse.ArgumentParser):
    """argparse with usage-error exit code 1 and a valid-flag listing."""

    def error(self, message):
        flags = sorted(
            s for a in self._actions for s in a.option_strings
        )
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        if flags:
            sys.stderr.write(f"valid flags: {' '.join(flags)}\n")
        raise SystemExit(1)


def _common(sub, out_required=True):
    sub.add_argument("--config", help="key-value config file")
    sub.add_argument("--seed", type=int, default=0, help="master random seed")
    sub.add_argument("--out", required=out_required, help="output directory")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config entry (repeatable)")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads for data-parallel stages")
    sub.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="discorel", description=__doc__)
    parser.add_argument("--version", action="version", version=f"discorel {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("extract", help="mine explicit argument pairs from raw text")
    _common(p)
    p.add_argument("--corpus", required=True, help="directory of plain-text documents")
    p.add_argument("--lexicon", required=True, help="tab-separated connective lexicon")
    p.set_defaults(fn=commands.cmd_extract)

    p = subs.add_parser("synth", help="generate a synthetic corpus with known ground truth")
    _common(p)
    p.set_defaults(fn=commands.cmd_synth)

    p = subs.add_parser("vocab", help="build a vocabulary from record shards")
    _common(p)
    p.add_argument("--data", required=True, help="shard directory")
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--max-size", type=int, default=None)
    p.add_argument("--lexicon", help="force-include this lexicon's canonical tokens")
    p.set_defaults(fn=commands.cmd_vocab)

    p = subs.add_parser("pretrain", help="pre-train the encoder on explicit shards")
    _common(p)
    p.add_argument("--data", required=True, help="explicit shard directory")
    p.add_argument("--vocab", required=True, help="vocab.tsv")
    p.add_argument("--resume", help="continue from an intermediate checkpoint")
    p.add_argument("--limit", type=int, default=None, help="cap the number of records")
    p.set_defaults(fn=commands.cmd_pretrain)

    p = subs.add_parser("tune", help="prompt-tune on labeled implicit data")
    _common(p)
    p.add_argument("--ckpt", help="pre-trained checkpoint (omit for random init)")
    p.add_argument("--data", help="labeled jsonl (train)")
    p.add_argument("--valid", help="labeled jsonl (validation)")
    p.add_argument("--pdtb", help="PDTB CSV export (sections decide the split)")
    p.add_argument("--level", default="top", choices=["top", "second"])
    p.add_argument("--vocab", required=True)
    p.add_argument("--verbalizer", required=True,
                   help="scheme name (pdtb_top4|pdtb_second11|conll14) or a tsv file")
    p.set_defaults(fn=commands.cmd_tune)

    p = subs.add_parser("eval", help="evaluate a checkpoint on labeled data")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="labeled jsonl")
    p.add_argument("--pdtb", help="PDTB CSV export")
    p.add_argument("--level", default="top", choices=["top", "second"])
    p.add_argument("--split", default="test", help="split when loading exports")
    p.add_argument("--vocab", required=True)
    p.add_argument("--verbalizer", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(fn=commands.cmd_eval)

    p = subs.add_parser("ablate", help="objective-ablation matrix on a synthetic dir")
    _common(p)
    p.add_argument("--data-dir", required=True, help="directory written by `synth`")
    p.add_argument("--variants", help="comma list, e.g. full,-GLSL,-CM")
    p.add_argument("--seeds", help="comma list of seeds, e.g. 1,2,3,4,5")
    p.set_defaults(fn=commands.cmd_ablate)

    p = subs.add_parser("fewshot", help="tuning-data fraction sweep")
    _common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--fractions", default="0.1,0.2,0.5,1.0")
    p.set_defaults(fn=commands.cmd_fewshot)

    p = subs.add_parser("datascale", help="explicit-data scale sweep")
    _common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--scales", default="1000,5000,20000")
    p.set_defaults(fn=commands.cmd_datascale)

    p = subs.add_parser("gradcheck", help="finite-difference gradient validation")
    _common(p, out_required=False)
    p.add_argument("--module", default="all",
                   choices=["all", "encoder", "mhca", "discriminator", "losses"])
    p.set_defaults(fn=commands.cmd_gradcheck)

    p = subs.add_parser("report", help="render harness CSVs / dataset statistics")
    _common(p)
    p.add_argument("--csv", action="append", help="harness CSV to render (repeatable)")
    p.add_argument("--pdtb", help="PDTB CSV export for dataset statistics")
    p.add_argument("--level", default="top", choices=["top", "second"])
    p.add_argument("--verbalizer", default="pdtb_top4")
    p.set_defaults(fn=commands.cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except DiscorelError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
