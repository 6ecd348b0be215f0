"""End-to-end pipeline: corpus, both training phases, validation tuning, test comparison, ablations.

Every random draw comes from a generator keyed by (run seed, stage label,
example index), so results do not depend on thread scheduling or on which
stages ran before.
"""

from __future__ import annotations

import json
import logging
import math
import os
import statistics
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from vptlab import __version__
from vptlab.backbone import checkpoint
from vptlab.backbone.model import Backbone, BackboneConfig
from vptlab.backbone.train import EncodedExample, encode_examples, evaluate_token_accuracy, make_pairs, teacher_forced_loss, train_backbone
from vptlab.config import ExperimentConfig, dumps_config
from vptlab.corpus import Example, Splits, Vocabulary, generate_corpus, load_splits, save_splits
from vptlab.decode import (
    BackboneDecoder,
    Candidate,
    CandidateSet,
    beam_search,
    diverse_beam_search,
    generate_vpt_candidates,
    greedy,
    greedy_batch,
    rescore,
    sample,
    save_candidate_sets,
    stochastic_beam_search,
)
from vptlab.errors import DataError, MetricError, UsageError
from vptlab.metrics import MetricReport, evaluate_sets, oracle_score, render_table, wilcoxon_signed_rank
from vptlab.numerics.tensor import no_grad
from vptlab.select import PairCache, SelectionConfig, first_unique, greedy_select
from vptlab.vpt.model import VPT, VPTConfig, parameter_budget
from vptlab.vpt.train import evaluate_vpt, train_vpt

log = logging.getLogger(__name__)

STRATEGIES = ("greedy", "sample", "beam", "sbs", "dbs", "vpt")


def stage_rng(seed: int, label: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(label.encode("utf-8")), index])


def decode_threads() -> int:
    raw = os.environ.get("VPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"VPT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"VPT_THREADS must be a positive integer, got {raw!r}")
    return n


def map_ordered(fn: Callable, items: Sequence, threads: int = 1) -> list:
    if threads <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n")


# checkpoints ---------------------------------------------------------------------------


def save_backbone(path: str | Path, backbone: Backbone, vocab: Vocabulary) -> str:
    return checkpoint.save(path, backbone.state_dict(), {"kind": "backbone", "config": backbone.cfg.to_dict(), "vocab": vocab.tokens})


def load_backbone(path: str | Path) -> tuple[Backbone, Vocabulary]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "backbone":
        raise DataError(f"{path} is not a backbone checkpoint")
    backbone = Backbone(BackboneConfig(**meta["config"]))
    backbone.load_state_dict(tensors)
    backbone.eval()
    return backbone, Vocabulary(list(meta["vocab"]))


def save_vpt(path: str | Path, vpt: VPT, backbone_hash: str) -> str:
    tensors = {f"vpt/{name}": value for name, value in vpt.state_dict().items()}
    return checkpoint.save(path, tensors, {"kind": "vpt", "config": vpt.cfg.to_dict(), "backbone_sha256": backbone_hash})


def load_vpt(path: str | Path, backbone: Backbone, backbone_hash: str | None = None) -> VPT:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "vpt":
        raise DataError(f"{path} is not a VPT checkpoint")
    if backbone_hash is not None and meta.get("backbone_sha256") not in (None, backbone_hash):
        raise DataError(f"{path} was trained on a different backbone")
    vpt = VPT(backbone.cfg, VPTConfig(**meta["config"]))
    vpt.load_state_dict({name.removeprefix("vpt/"): value for name, value in tensors.items()})
    vpt.eval()
    return vpt


# pools ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolSpec:
    """How to produce one candidate set per input."""

    strategy: str
    size: int  # beams, samples or latents
    temperature: float = 1.0  # sampling temperature, or the SBS temperature
    tau: float = 1.0
    groups: int = 1
    diversity_lambda: float = 0.0
    per_latent: str = "beam"
    per_latent_beam: int = 4
    standard_prior: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.size < 1:
            raise UsageError("pool size must be at least 1")

    @property
    def name(self) -> str:
        s = self.strategy
        if s == "sample":
            return f"sample{self.size}_T{self.temperature:g}"
        if s == "sbs":
            return f"sbs{self.size}_T{self.temperature:g}"
        if s == "dbs":
            return f"dbs{self.size}_G{self.groups}_L{self.diversity_lambda:g}"
        if s == "vpt":
            prior = "_std" if self.standard_prior else ""
            per = f"beam{self.per_latent_beam}" if self.per_latent == "beam" else "greedy"
            return f"vpt{self.size}_tau{self.tau:g}_{per}{prior}"
        return f"{s}{self.size}" if s == "beam" else s


def unique_in_order(cands: Iterable[Candidate]) -> list[Candidate]:
    seen: set[tuple[int, ...]] = set()
    out = []
    for c in cands:
        if c.tokens not in seen:
            seen.add(c.tokens)
            out.append(c)
    return out


def generate_one(spec: PoolSpec, backbone: Backbone, vpt: VPT | None, x: Sequence[int], rng: np.random.Generator, max_steps: int, min_length: int = 1) -> list[Candidate]:
    model = BackboneDecoder(backbone)
    s = spec.strategy
    if s == "greedy":
        return [greedy(model, x, max_steps=max_steps, min_length=min_length)]
    if s == "beam":
        return beam_search(model, x, spec.size, max_steps=max_steps, min_length=min_length)
    if s == "sample":
        return sample(model, x, spec.temperature, rng, spec.size, max_steps=max_steps, min_length=min_length)
    if s == "sbs":
        return stochastic_beam_search(model, x, spec.size, spec.temperature, rng, max_steps=max_steps, min_length=min_length)
    if s == "dbs":
        return diverse_beam_search(model, x, spec.size, spec.groups, spec.diversity_lambda, max_steps=max_steps, min_length=min_length)
    if vpt is None:
        raise UsageError("the vpt strategy needs a VPT checkpoint")
    return generate_vpt_candidates(
        model, vpt, x, spec.size, spec.tau, rng,
        beam_width=spec.per_latent_beam, per_latent=spec.per_latent,
        max_steps=max_steps, standard_prior=spec.standard_prior,
    )


def generate_pools(
    spec: PoolSpec,
    backbone: Backbone,
    vpt: VPT | None,
    encoded: Sequence[EncodedExample],
    seed: int,
    max_steps: int = 24,
    threads: int = 1,
    offset: int = 0,
) -> list[list[Candidate]]:
    """Candidates per input, duplicates dropped (first occurrence kept) and rescored by the bare backbone."""

    def run(item):
        i, e = item
        raw = generate_one(spec, backbone, vpt, e.src, stage_rng(seed, spec.name, offset + i), max_steps)
        return rescore(backbone, e.src, unique_in_order(raw))

    return map_ordered(run, list(enumerate(encoded)), threads)


def selection_weights(ratio: float) -> tuple[float, float]:
    """(alpha, beta) for a diversity-to-quality ratio; an infinite ratio means diversity only."""
    if ratio < 0:
        raise UsageError("the beta/alpha ratio must be non-negative")
    return (0.0, 1.0) if math.isinf(ratio) else (1.0, float(ratio))


def select_indices(pool: Sequence[Candidate], u: int, mode: str, alpha: float = 1.0, beta: float = 1.0, cache: PairCache | None = None) -> list[int]:
    if mode == "all":
        return list(range(min(u, len(pool))))
    if mode == "first_unique":
        return first_unique(pool, u).chosen
    if mode == "bi":
        if len(pool) <= u:
            return list(range(len(pool)))
        return greedy_select(pool, SelectionConfig(u=u, alpha=alpha, beta=beta), cache).chosen
    raise UsageError(f"unknown selection mode {mode!r}")


def chosen_texts(pool: Sequence[Candidate], chosen: Sequence[int], vocab: Vocabulary) -> list[list[str]]:
    return [vocab.decode(list(pool[i].content)) for i in chosen]


def mean_oracle_bleu(pools, selections, examples: Sequence[Example], vocab: Vocabulary) -> float:
    scores = [oracle_score(chosen_texts(p, s, vocab) or [[]], list(ex.refs)) for p, s, ex in zip(pools, selections, examples)]
    return float(np.mean(scores))


def report_for(name: str, pools, selections, examples: Sequence[Example], vocab: Vocabulary, distinct_mode: str) -> MetricReport:
    return evaluate_sets(
        name,
        [ex.id for ex in examples],
        [chosen_texts(p, s, vocab) for p, s in zip(pools, selections)],
        [list(ex.refs) for ex in examples],
        distinct_mode,
    )


def candidate_sets(name: str, examples: Sequence[Example], pools, selections, mode: str) -> list[CandidateSet]:
    out = []
    for ex, pool, sel in zip(examples, pools, selections):
        if mode == "all":
            out.append(CandidateSet(ex.id, name, [pool[i] for i in sel]))
        else:
            out.append(CandidateSet(ex.id, name, list(pool), list(sel)))
    return out


def paired_test(a: MetricReport, b: MetricReport, metric: str = "bleu") -> dict:
    """One-sided Wilcoxon of H1: ``a`` beats ``b`` on per-example ``metric``."""
    ids_a = [r["id"] for r in a.per_example]
    if ids_a != [r["id"] for r in b.per_example]:
        raise DataError("reports cover different examples")
    deltas = [x - y for x, y in zip(a.values(metric), b.values(metric))]
    out = {"a": a.name, "b": b.name, "metric": metric, "n": len(deltas), "mean_delta": float(np.mean(deltas)) if deltas else 0.0,
           "wins": sum(d > 1e-12 for d in deltas), "losses": sum(d < -1e-12 for d in deltas)}
    try:
        out.update(wilcoxon_signed_rank(deltas).to_json())
    except MetricError as exc:
        out.update(statistic=None, n_effective=out["wins"] + out["losses"], p_value=None, significant_at=False, method=f"undefined: {exc}")
    return out


# tuning ----------------------------------------------------------------------------------


@dataclass
class TunedMethod:
    spec: PoolSpec
    ratio: float | None  # beta/alpha; None for strategies that emit U candidates directly
    score: float

    def weights(self) -> dict:
        if self.ratio is None:
            return {}
        alpha, beta = selection_weights(self.ratio)
        return {"alpha": alpha, "beta": beta}


def tune_selecting(
    specs: Sequence[PoolSpec],
    ratios: Sequence[float],
    u: int,
    backbone: Backbone,
    vpt: VPT | None,
    encoded: Sequence[EncodedExample],
    examples: Sequence[Example],
    vocab: Vocabulary,
    seed: int,
    max_steps: int,
    threads: int,
) -> tuple[TunedMethod, list[dict]]:
    """Grid over pool settings and the beta/alpha ratio; the first best setting in grid order wins."""
    best: TunedMethod | None = None
    grid = []
    for spec in specs:
        pools = generate_pools(spec, backbone, vpt, encoded, seed, max_steps, threads)
        caches = [PairCache(p) for p in pools]
        for ratio in ratios:
            alpha, beta = selection_weights(ratio)
            sels = [select_indices(p, u, "bi", alpha, beta, c) for p, c in zip(pools, caches)]
            score = mean_oracle_bleu(pools, sels, examples, vocab)
            grid.append({"pool": spec.name, "alpha": alpha, "beta": beta, "oracle_bleu": score})
            log.info("tune %s alpha=%g beta=%g: %.4f", spec.name, alpha, beta, score)
            if best is None or score > best.score:
                best = TunedMethod(spec, ratio, score)
    return best, grid


def tune_direct(specs, backbone, encoded, examples, vocab, seed, max_steps, threads) -> tuple[TunedMethod, list[dict]]:
    best: TunedMethod | None = None
    grid = []
    for spec in specs:
        pools = generate_pools(spec, backbone, None, encoded, seed, max_steps, threads)
        score = mean_oracle_bleu(pools, [list(range(len(p))) for p in pools], examples, vocab)
        grid.append({"pool": spec.name, "oracle_bleu": score})
        log.info("tune %s: %.4f", spec.name, score)
        if best is None or score > best.score:
            best = TunedMethod(spec, None, score)
    return best, grid


# diagnostics ---------------------------------------------------------------------------


def latent_effectiveness(backbone: Backbone, vpt: VPT, encoded: Sequence[EncodedExample], seed: int, tau: float = 1.0, max_steps: int = 24) -> float:
    """Share of inputs on which two independent prior latents give different greedy decodes."""
    if not encoded:
        return math.nan
    model = BackboneDecoder(backbone)
    differ = 0
    for i, e in enumerate(encoded):
        latents = vpt.sample_prior(backbone, e.src, tau, stage_rng(seed, "latent-pairs", i), n=2)
        a, b = greedy_batch(model, e.src, 2, latents.prefix, max_steps)
        differ += a.tokens != b.tokens
    return differ / len(encoded)


def step0_reconstruction(backbone: Backbone, vpt_cfg: VPTConfig, encoded: Sequence[EncodedExample], seed: int) -> dict:
    """Reconstruction of a freshly initialized VPT against the bare backbone's per-sequence loss."""
    fresh = VPT(backbone.cfg, vpt_cfg, seed=seed + 1)
    ev = evaluate_vpt(backbone, fresh, list(encoded), seed=seed)
    pairs = make_pairs(list(encoded))
    with no_grad():
        base = sum(float(teacher_forced_loss(backbone, pairs[i : i + 64], reduction="sequence").data) * len(pairs[i : i + 64]) for i in range(0, len(pairs), 64))
    base /= len(pairs)
    return {"vpt_reconstruction": ev["reconstruction"], "backbone_loss": base, "relative_gap": ev["reconstruction"] / base - 1.0}


# the pipeline ----------------------------------------------------------------------------


@dataclass
class Artifacts:
    splits: Splits
    vocab: Vocabulary
    backbone: Backbone
    vpt: VPT


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, threads: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(cfg.run.out_dir)
        self.threads = decode_threads() if threads is None else threads
        self.stages: dict[str, dict] = {}
        self.hashes: dict[str, str] = {}

    def _stage(self, name: str, t0: float, **metrics) -> None:
        self.stages[name] = {"seconds": round(time.perf_counter() - t0, 3), **metrics}
        log.info("stage %s done in %.1fs", name, self.stages[name]["seconds"])

    # stages
    def corpus(self) -> Splits:
        t0 = time.perf_counter()
        c = self.cfg.corpus
        if c.path:
            splits = load_splits(c.path)
        else:
            splits = generate_corpus(self.cfg.run.seed, c.n_examples, (c.refs_min, c.refs_max), opener_bias=c.opener_bias)
            save_splits(self.out / "corpus", splits)
        if not splits.train or not splits.valid or not splits.test:
            raise DataError("every split needs at least one example")
        self._stage("corpus", t0, train=len(splits.train), valid=len(splits.valid), test=len(splits.test))
        return splits

    def phase1(self, splits: Splits) -> tuple[Backbone, Vocabulary]:
        t0 = time.perf_counter()
        vocab = Vocabulary.build(splits.train)
        bcfg = self.cfg.backbone.model_config(len(vocab))
        backbone = Backbone(bcfg, seed=self.cfg.run.seed)
        train = encode_examples(splits.train, vocab, bcfg.max_len)
        valid = encode_examples(splits.valid, vocab, bcfg.max_len)
        t = self.cfg.train
        history = train_backbone(backbone, train, valid, t.backbone_epochs, t.batch_size, t.backbone_lr, seed=self.cfg.run.seed)
        acc = evaluate_token_accuracy(backbone, valid)
        self.hashes["backbone.ckpt"] = save_backbone(self.out / "backbone.ckpt", backbone, vocab)
        write_text(self.out / "backbone_loss.csv", history.loss_curve_csv())
        write_text(self.out / "backbone_epochs.csv", history.epochs_csv())
        self._stage("train_backbone", t0, valid_token_accuracy=acc.multi, valid_token_accuracy_single_ref=acc.single, valid_loss=acc.loss,
                    parameters=backbone.num_parameters())
        return backbone, vocab

    def phase2(self, backbone: Backbone, splits: Splits, vocab: Vocabulary, vpt_cfg: VPTConfig | None = None, tag: str = "vpt",
               epochs: int | None = None) -> VPT:
        t0 = time.perf_counter()
        vpt_cfg = vpt_cfg or self.cfg.vpt
        train = encode_examples(splits.train, vocab, backbone.cfg.max_len)
        valid = encode_examples(splits.valid, vocab, backbone.cfg.max_len)
        vpt = VPT(backbone.cfg, vpt_cfg, seed=self.cfg.run.seed + 1)
        t = self.cfg.train
        history = train_vpt(backbone, vpt, train, epochs or t.vpt_epochs, valid, t.batch_size, t.vpt_lr, seed=self.cfg.run.seed + 2)
        budget = parameter_budget(backbone, vpt)
        if tag == "vpt":
            self.hashes["vpt.ckpt"] = save_vpt(self.out / "vpt.ckpt", vpt, self.hashes.get("backbone.ckpt", ""))
        write_text(self.out / f"{tag}_loss.csv", history.loss_curve_csv())
        last = history.epochs[-1] if history.epochs else {}
        self._stage(f"train_{tag}", t0, final_valid_kl=history.final_kl, final_valid_reconstruction=last.get("valid_reconstruction"),
                    parameter_budget=budget)
        return vpt

    def run(self) -> dict:
        start = time.perf_counter()
        self.out.mkdir(parents=True, exist_ok=True)
        cfg = self.cfg
        write_text(self.out / "config.txt", dumps_config(cfg))
        splits = self.corpus()
        backbone, vocab = self.phase1(splits)
        vpt = self.phase2(backbone, splits, vocab)
        arts = Artifacts(splits, vocab, backbone, vpt)
        tuned = self.tune(arts)
        results = self.evaluate(arts, tuned)
        diagnostics = self.diagnostics(arts, tuned)
        wall = time.perf_counter() - start
        manifest = {
            "tool": "vptlab",
            "version": __version__,
            "seed": cfg.run.seed,
            "config": cfg.to_dict(),
            "threads": self.threads,
            "checkpoint_sha256": self.hashes,
            "wall_clock_seconds": round(wall, 1),
            "stages": self.stages,
            "tuned": {k: {"pool": v.spec.name, **v.weights(), "valid_oracle_bleu": v.score} for k, v in tuned.items()},
            "results": results,
            "diagnostics": diagnostics,
        }
        manifest["checks"] = self.checks(manifest)
        write_json(self.out / "manifest.json", manifest)
        return manifest

    def tune(self, arts: Artifacts) -> dict[str, TunedMethod]:
        t0 = time.perf_counter()
        cfg, tcfg = self.cfg, self.cfg.tune
        u = cfg.eval.u_values[0]
        n = cfg.pool.n_candidates
        steps, seed = cfg.decode.max_steps, cfg.run.seed
        examples = arts.splits.valid[: tcfg.n_valid]
        encoded = encode_examples(examples, arts.vocab, arts.backbone.cfg.max_len)
        dbs_groups = cfg.decode.dbs_groups
        tuned: dict[str, TunedMethod] = {}
        grids: dict[str, list] = {}
        if tcfg.enabled:
            vpt_specs = [PoolSpec("vpt", n, tau=t, per_latent=cfg.pool.per_latent, per_latent_beam=cfg.pool.per_latent_beam) for t in tcfg.tau_grid]
            samp_specs = [PoolSpec("sample", n, temperature=t) for t in tcfg.temperature_grid]
            sbs_specs = [PoolSpec("sbs", u, temperature=t) for t in tcfg.sbs_temperature_grid]
            dbs_specs = [PoolSpec("dbs", u, groups=dbs_groups, diversity_lambda=lam) for lam in tcfg.dbs_lambda_grid]
        else:
            d = cfg.decode
            vpt_specs = [PoolSpec("vpt", n, tau=cfg.pool.tau, per_latent=cfg.pool.per_latent, per_latent_beam=cfg.pool.per_latent_beam)]
            samp_specs = [PoolSpec("sample", n, temperature=d.temperature)]
            sbs_specs = [PoolSpec("sbs", u, temperature=d.sbs_temperature)]
            dbs_specs = [PoolSpec("dbs", u, groups=dbs_groups, diversity_lambda=d.dbs_lambda)]
        ratios = tcfg.beta_grid if tcfg.enabled else (cfg.select.beta / cfg.select.alpha if cfg.select.alpha else math.inf,)
        sel_args = (ratios, u, arts.backbone)
        tuned["vpt"], grids["vpt"] = tune_selecting(vpt_specs, *sel_args, arts.vpt, encoded, examples, arts.vocab, seed, steps, self.threads)
        tuned["sample"], grids["sample"] = tune_selecting(samp_specs, *sel_args, None, encoded, examples, arts.vocab, seed, steps, self.threads)
        direct_args = (arts.backbone, encoded, examples, arts.vocab, seed, steps, self.threads)
        tuned["sbs"], grids["sbs"] = tune_direct(sbs_specs, *direct_args)
        tuned["dbs"], grids["dbs"] = tune_direct(dbs_specs, *direct_args)
        write_json(self.out / "tuning.json", {"u": u, "n_valid": len(examples), "grids": grids,
                                               "chosen": {k: {"pool": v.spec.name, **v.weights(), "oracle_bleu": v.score} for k, v in tuned.items()}})
        self._stage("tune", t0, chosen={k: v.spec.name for k, v in tuned.items()})
        return tuned

    def evaluate(self, arts: Artifacts, tuned: dict[str, TunedMethod]) -> dict:
        t0 = time.perf_counter()
        cfg = self.cfg
        seed, steps = cfg.run.seed, cfg.decode.max_steps
        examples = arts.splits.test if cfg.eval.n_test <= 0 else arts.splits.test[: cfg.eval.n_test]
        encoded = encode_examples(examples, arts.vocab, arts.backbone.cfg.max_len)
        (self.out / "candidates").mkdir(exist_ok=True)
        (self.out / "reports").mkdir(exist_ok=True)

        pool_cache: dict[PoolSpec, list] = {}

        def pools_for(spec: PoolSpec):
            if spec not in pool_cache:
                pool_cache[spec] = generate_pools(spec, arts.backbone, arts.vpt, encoded, seed + 1000, steps, self.threads)
            return pool_cache[spec]

        def emit(name: str, spec: PoolSpec, u: int, mode: str, ratio: float = 1.0) -> MetricReport:
            pools = pools_for(spec)
            alpha, beta = selection_weights(ratio)
            sels = [select_indices(p, u, mode, alpha, beta) for p in pools]
            save_candidate_sets(self.out / "candidates" / f"{name}.jsonl", candidate_sets(name, examples, pools, sels, mode), arts.vocab)
            rep = report_for(name, pools, sels, examples, arts.vocab, cfg.eval.distinct_mode)
            write_text(self.out / "reports" / f"{name}.json", rep.dumps() + "\n")
            return rep

        tables, comparisons, all_reports = {}, {}, {}
        for u in cfg.eval.u_values:
            groups = cfg.decode.dbs_groups if u % cfg.decode.dbs_groups == 0 else 1
            reps = {
                "beam": emit(f"beam_U{u}", PoolSpec("beam", u), u, "all"),
                "sample": emit(f"sampling_U{u}", tuned["sample"].spec, u, "bi", tuned["sample"].ratio),
                "sbs": emit(f"sbs_U{u}", replace(tuned["sbs"].spec, size=u), u, "all"),
                "dbs": emit(f"dbs_U{u}", replace(tuned["dbs"].spec, size=u, groups=groups), u, "all"),
                "vpt": emit(f"vpt_U{u}", tuned["vpt"].spec, u, "bi", tuned["vpt"].ratio),
            }
            all_reports[u] = reps
            table = render_table(list(reps.values()))
            tables[f"U{u}"] = table
            comparisons[f"U{u}"] = [paired_test(reps["vpt"], reps[k]) for k in ("beam", "sample", "sbs", "dbs")]
            log.info("test U=%d\n%s", u, table)

        u0 = cfg.eval.u_values[0]
        main = tuned["vpt"]
        abl = {
            "greedy_per_latent": emit(f"vpt_greedy_per_latent_U{u0}", replace(main.spec, per_latent="greedy" if main.spec.per_latent == "beam" else "beam"), u0, "bi", main.ratio),
            "first_unique": emit(f"vpt_first_unique_U{u0}", main.spec, u0, "first_unique"),
            "standard_prior": emit(f"vpt_standard_prior_U{u0}", replace(main.spec, standard_prior=True), u0, "bi", main.ratio),
        }
        base = all_reports[u0]["vpt"]
        ablations = {
            "table": render_table([base, *abl.values()]),
            "tests": [paired_test(base, rep) for rep in abl.values()],
        }
        text = []
        for key, table in tables.items():
            text += [f"== test split, {key} ==", table, ""]
            for c in comparisons[key]:
                text.append(_format_test(c))
            text.append("")
        text += ["== ablations ==", ablations["table"], ""] + [_format_test(c) for c in ablations["tests"]]
        write_text(self.out / "results.txt", "\n".join(text) + "\n")
        write_json(self.out / "ablations.json", {"tests": ablations["tests"]})
        means = {f"U{u}": {k: r.means for k, r in reps.items()} for u, reps in all_reports.items()}
        self._stage("evaluate", t0, n_test=len(examples))
        self._pool_cache = pool_cache
        return {"means": means, "comparisons": comparisons, "ablations": ablations["tests"],
                "ablation_means": {k: r.means for k, r in abl.items()}}

    def diagnostics(self, arts: Artifacts, tuned: dict[str, TunedMethod]) -> dict:
        t0 = time.perf_counter()
        cfg = self.cfg
        seed = cfg.run.seed
        valid = arts.splits.valid[: cfg.tune.n_valid]
        enc = encode_examples(valid, arts.vocab, arts.backbone.cfg.max_len)
        out: dict = {}
        out["latent_effectiveness"] = latent_effectiveness(arts.backbone, arts.vpt, enc[: cfg.eval.latent_pairs], seed, 1.0, cfg.decode.max_steps)
        sizes = {}
        for key in ("vpt", "sample"):
            pools = generate_pools(tuned[key].spec, arts.backbone, arts.vpt, enc, seed, cfg.decode.max_steps, self.threads)
            sizes[key] = statistics.median(len(p) for p in pools)
        out["median_distinct_in_pool"] = sizes
        out["step0_reconstruction"] = step0_reconstruction(arts.backbone, cfg.vpt, enc, seed)
        out["final_kl"] = self.stages["train_vpt"]["final_valid_kl"]
        out["parameter_budget"] = self.stages["train_vpt"]["parameter_budget"]
        if cfg.eval.collapse_diagnostic:
            plain = replace(cfg.vpt, anneal=False, use_batchnorm=False)
            weak = self.phase2(arts.backbone, arts.splits, arts.vocab, plain, tag="vpt_no_anneal_no_bn", epochs=cfg.eval.collapse_epochs)
            out["collapse_comparison"] = {"final_kl_no_anneal_no_bn": self.stages["train_vpt_no_anneal_no_bn"]["final_valid_kl"],
                                          "final_kl_default": out["final_kl"]}
            del weak
        write_json(self.out / "diagnostics.json", out)
        self._stage("diagnostics", t0)
        return out

    def checks(self, manifest: dict) -> dict:
        """Directional outcomes of the main comparison, recorded rather than enforced."""
        u = f"U{self.cfg.eval.u_values[0]}"
        means = manifest["results"]["means"][u]
        budget = manifest["diagnostics"]["parameter_budget"]
        return {
            "backbone_token_accuracy_at_least_0.9": manifest["stages"]["train_backbone"]["valid_token_accuracy"] >= 0.9,
            "vpt_oracle_bleu_above_beam": means["vpt"]["bleu"] > means["beam"]["bleu"],
            "vpt_oracle_bleu_above_sampling": means["vpt"]["bleu"] > means["sample"]["bleu"],
            "vpt_self_bleu_below_beam": (means["vpt"]["self_bleu"] or 1.0) < (means["beam"]["self_bleu"] or 1.0),
            "final_kl_above_0.1": (manifest["diagnostics"]["final_kl"] or 0.0) > 0.1,
            "trainable_ratio_below_0.2": budget["trainable_ratio"] < 0.2,
            "wall_clock_below_30_minutes": manifest["wall_clock_seconds"] < 1800,
        }


def _format_test(c: dict) -> str:
    p = "n/a" if c["p_value"] is None else f"{c['p_value']:.4g}"
    return (f"{c['a']} vs {c['b']}: mean delta {c['mean_delta']:+.4f}, wins {c['wins']}, losses {c['losses']}, "
            f"one-sided Wilcoxon p = {p} ({c['method']}){' *' if c['significant_at'] else ''}")


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> dict:
    return Pipeline(cfg, threads).run()
