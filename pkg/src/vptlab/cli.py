"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from vptlab import __version__
from vptlab.backbone.checkpoint import file_hash
from vptlab.backbone.model import Backbone
from vptlab.backbone.train import encode_examples, evaluate_token_accuracy, train_backbone
from vptlab.config import ExperimentConfig, load_config
from vptlab.corpus import SPECIAL_TOKENS, Example, Vocabulary, generate_corpus, load_jsonl, load_splits, save_splits
from vptlab.decode import CandidateSet, load_candidate_sets, save_candidate_sets
from vptlab.errors import DataError, MetricError, UsageError
from vptlab.experiment import (
    STRATEGIES,
    PoolSpec,
    decode_threads,
    generate_pools,
    load_backbone,
    load_vpt,
    paired_test,
    run_experiment,
    save_backbone,
    save_vpt,
    select_indices,
    write_json,
    write_text,
)
from vptlab.metrics import MetricReport, evaluate_sets, render_table
from vptlab.vpt.model import VPT, parameter_budget
from vptlab.vpt.train import train_vpt

log = logging.getLogger("vptlab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MAX_TRAINABLE_RATIO = 0.2


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.overrides or ())


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} {path} does not exist")
    return p


def _splits(path: str):
    _need_file(path, "corpus directory")
    return load_splits(path)


def _examples(path: str, split: str) -> list[Example]:
    p = _need_file(path, "corpus")
    return load_jsonl(p / f"{split}.jsonl") if p.is_dir() else load_jsonl(p)


# subcommands ------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    splits = generate_corpus(args.seed, args.n, opener_bias=args.opener_bias)
    save_splits(args.out, splits)
    print(f"wrote {len(splits.train)}/{len(splits.valid)}/{len(splits.test)} train/valid/test examples to {args.out}")
    return EXIT_OK


def cmd_train_backbone(args) -> int:
    cfg = _config(args)
    splits = _splits(args.corpus)
    vocab = Vocabulary.build(splits.train)
    backbone = Backbone(cfg.backbone.model_config(len(vocab)), seed=cfg.run.seed)
    train = encode_examples(splits.train, vocab, backbone.cfg.max_len)
    valid = encode_examples(splits.valid, vocab, backbone.cfg.max_len)
    t = cfg.train
    history = train_backbone(backbone, train, valid, t.backbone_epochs, t.batch_size, t.backbone_lr, seed=cfg.run.seed)
    digest = save_backbone(args.out_ckpt, backbone, vocab)
    out = Path(args.out_ckpt)
    write_text(out.with_name(out.stem + "_loss.csv"), history.loss_curve_csv())
    acc = evaluate_token_accuracy(backbone, valid)
    print(f"backbone: {backbone.num_parameters()} parameters, validation token accuracy {acc.multi:.4f}, sha256 {digest[:12]}")
    return EXIT_OK


def cmd_train_vpt(args) -> int:
    cfg = _config(args)
    _need_file(args.backbone_ckpt, "backbone checkpoint")
    backbone, vocab = load_backbone(args.backbone_ckpt)
    splits = _splits(args.corpus)
    train = encode_examples(splits.train, vocab, backbone.cfg.max_len)
    valid = encode_examples(splits.valid, vocab, backbone.cfg.max_len)
    vpt = VPT(backbone.cfg, cfg.vpt, seed=cfg.run.seed + 1)
    t = cfg.train
    history = train_vpt(backbone, vpt, train, t.vpt_epochs, valid, t.batch_size, t.vpt_lr, seed=cfg.run.seed + 2)
    budget = parameter_budget(backbone, vpt)
    print(
        f"trainable {budget['trainable_parameters']} of {budget['total_parameters']} parameters "
        f"(ratio {budget['trainable_ratio']:.4f}; {budget['ratio_to_full_finetune']:.4f} of full fine-tuning)"
    )
    if budget["trainable_ratio"] >= MAX_TRAINABLE_RATIO:
        raise UsageError(f"trainable ratio {budget['trainable_ratio']:.3f} is not below {MAX_TRAINABLE_RATIO}")
    save_vpt(args.out_ckpt, vpt, file_hash(args.backbone_ckpt))
    out = Path(args.out_ckpt)
    write_text(out.with_name(out.stem + "_loss.csv"), history.loss_curve_csv())
    print(f"final validation KL {history.final_kl}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {args.strategy!r}")
    _need_file(args.ckpt, "backbone checkpoint")
    backbone, vocab = load_backbone(args.ckpt)
    vpt = None
    if args.strategy == "vpt":
        if not args.vpt_ckpt:
            raise UsageError("--strategy vpt needs --vpt-ckpt")
        _need_file(args.vpt_ckpt, "VPT checkpoint")
        vpt = load_vpt(args.vpt_ckpt, backbone, file_hash(args.ckpt))
    examples = _examples(args.corpus, args.split)
    if args.limit:
        examples = examples[: args.limit]
    size = args.beam if args.strategy in ("beam", "sbs", "dbs") else args.n
    temp = args.temp if args.strategy == "sample" else args.sbs_temp
    spec = PoolSpec(args.strategy, size, temperature=temp, tau=args.tau, groups=args.groups, diversity_lambda=args.dbs_lambda,
                    per_latent=args.per_latent, per_latent_beam=args.per_latent_beam)
    encoded = encode_examples(examples, vocab, backbone.cfg.max_len)
    pools = generate_pools(spec, backbone, vpt, encoded, args.seed, args.max_steps, decode_threads())
    save_candidate_sets(args.out, [CandidateSet(ex.id, spec.name, pool) for ex, pool in zip(examples, pools)], vocab)
    print(f"wrote {len(pools)} candidate sets ({spec.name}) to {args.out}")
    return EXIT_OK


def _text_vocab(path: str) -> Vocabulary:
    """A vocabulary covering every token in a candidate file, so texts round-trip exactly."""
    tokens: set[str] = set()
    with _need_file(path, "candidate file").open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                for c in json.loads(line)["candidates"]:
                    tokens.update(c["text"].split())
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"line {n}: {exc}") from None
    return Vocabulary(list(SPECIAL_TOKENS) + sorted(tokens - set(SPECIAL_TOKENS)))


def cmd_select(args) -> int:
    vocab = _text_vocab(args.candidates)
    sets = load_candidate_sets(args.candidates, vocab)
    for s in sets:
        if args.mode == "bi" and any(c.quality is None for c in s.candidates):
            raise DataError(f"{s.id}: candidates lack backbone quality scores; regenerate them with `generate`")
        s.selected = select_indices(s.candidates, args.U, args.mode, args.alpha, args.beta)
    save_candidate_sets(args.out, sets, vocab)
    print(f"selected up to {args.U} of each of {len(sets)} candidate sets into {args.out}")
    return EXIT_OK


def build_report(sets: Sequence[CandidateSet], vocab: Vocabulary, examples: Sequence[Example], distinct_mode: str, name: str | None = None) -> MetricReport:
    by_id = {ex.id: ex for ex in examples}
    missing = [s.id for s in sets if s.id not in by_id]
    if missing:
        raise DataError(f"candidate ids not in the corpus: {missing[:5]}")
    if not sets:
        raise DataError("no candidate sets to evaluate")
    return evaluate_sets(
        name or sets[0].strategy,
        [s.id for s in sets],
        [s.texts(vocab, selected_only=True) for s in sets],
        [list(by_id[s.id].refs) for s in sets],
        distinct_mode,
    )


def cmd_evaluate(args) -> int:
    vocab = _text_vocab(args.candidates)
    sets = load_candidate_sets(args.candidates, vocab)
    report = build_report(sets, vocab, _examples(args.corpus, args.split), args.distinct_mode, args.name)
    write_text(Path(args.out), report.dumps() + "\n")
    print(render_table([report]))
    return EXIT_OK


def _load_report(path: str) -> MetricReport:
    try:
        obj = json.loads(_need_file(path, "report").read_text(encoding="utf-8"))
        return MetricReport(obj["name"], obj["distinct_mode"], obj["per_example"], obj["means"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a metric report ({exc})") from None


def cmd_compare(args) -> int:
    a, b = _load_report(args.report_a), _load_report(args.report_b)
    if args.metric not in ("bleu", "rouge_l", "meteor"):
        raise UsageError(f"unknown metric {args.metric!r}")
    result = paired_test(a, b, args.metric)
    if args.out:
        write_json(Path(args.out), result)
    p = "n/a" if result["p_value"] is None else f"{result['p_value']:.6g}"
    print(f"{a.name} vs {b.name} on {args.metric}: mean delta {result['mean_delta']:+.4f}, "
          f"wins {result['wins']}, losses {result['losses']}, one-sided Wilcoxon p = {p} ({result['method']})")
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    cfg = _config(args)
    if args.out_dir:
        cfg.run.out_dir = args.out_dir
    manifest = run_experiment(cfg)
    print(Path(cfg.run.out_dir, "results.txt").read_text(encoding="utf-8"))
    print(json.dumps(manifest["checks"], indent=1, sort_keys=True))
    print(f"wall clock {manifest['wall_clock_seconds']:.0f}s; outputs in {cfg.run.out_dir}")
    return EXIT_OK


# parser ------------------------------------------------------------------------------


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vptlab", description="Variational prefix tuning on a toy code-summarization task.")
    parser.add_argument("--version", action="version", version=f"vptlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=2860)
    p.add_argument("--opener-bias", type=float, default=0.6)
    p.add_argument("--out", required=True, help="output directory for train/valid/test JSONL")
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("train-backbone", help="phase 1: train the encoder-decoder")
    _add_config(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.set_defaults(fn=cmd_train_backbone)

    p = sub.add_parser("train-vpt", help="phase 2: train the latent prefix on a frozen backbone")
    _add_config(p)
    p.add_argument("--backbone-ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.set_defaults(fn=cmd_train_vpt)

    p = sub.add_parser("generate", help="decode candidate sets")
    p.add_argument("--ckpt", required=True, help="backbone checkpoint")
    p.add_argument("--vpt-ckpt", help="VPT checkpoint (strategy vpt)")
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--corpus", required=True, help="split directory or JSONL file")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--n", type=int, default=100, help="samples or latents per input")
    p.add_argument("--beam", type=int, default=10, help="beam width for beam, sbs and dbs")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--temp", type=float, default=1.0, help="sampling temperature")
    p.add_argument("--sbs-temp", type=float, default=1.0)
    p.add_argument("--groups", type=int, default=5)
    p.add_argument("--dbs-lambda", type=float, default=0.5)
    p.add_argument("--per-latent", choices=("beam", "greedy"), default="beam")
    p.add_argument("--per-latent-beam", type=int, default=4)
    p.add_argument("--max-steps", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("select", help="bi-criteria subset selection")
    p.add_argument("--candidates", required=True)
    p.add_argument("--U", type=int, default=10)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--mode", choices=("bi", "first_unique", "all"), default="bi")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("evaluate", help="oracle accuracy and diversity of candidate sets")
    p.add_argument("--candidates", required=True, help="candidate or selection JSONL")
    p.add_argument("--corpus", required=True, help="split directory or JSONL file")
    p.add_argument("--split", default="test")
    p.add_argument("--distinct-mode", choices=("set", "average"), default="set")
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", help="paired one-sided Wilcoxon test between two reports")
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.add_argument("--metric", default="bleu")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("run-experiment", help="the full pipeline with tuning, comparison and ablations")
    _add_config(p)
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_run_experiment)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (DataError, MetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:  # NumericError included
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
