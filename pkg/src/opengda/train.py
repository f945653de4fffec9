"""Alternating model/graph reprogramming training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import model as gm
from .graph import DomainPair, LabeledGraph, SplitIndices, split_source
from .losses import LossBreakdown, adv_loss, cls_loss, ent_loss
from .masks import apply_masks, build_masks, score_importance
from .metrics import EvalReport, evaluate, group_mmd, h_score, predict
from .optim import AdamW
from .reprogram import (
    EdgeEditSet,
    append_edit_log,
    build_candidate_pool,
    commit_flips,
    score_edge_flips,
    select_flips,
)
from .rng import stream
from .separation import BetaMixture, compute_entropy, fit_beta_mixture_em, posterior_known
from .tensor import Tape

log = logging.getLogger(__name__)

VARIANTS = ("full", "threshold", "no_mr", "no_gr", "no_adapt")


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, term: str, value: float):
        super().__init__(f"non-finite {term} loss ({value}) at epoch {epoch}")
        self.epoch = epoch
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.001
    lam: float = 1.0
    rho: float = 0.1
    budget_ratio: float = 0.05
    budget: int | None = None
    epochs: int = 200
    em_iters: int = 20
    seed: int = 0
    grl_scale: float = 1.0
    grl_warmup: bool = False
    variant: str = "full"
    tau: float = 0.5
    hidden: tuple = (128, 128)
    disc_hidden: int = 64
    slope: float = 0.0
    model_steps: int = 1
    graph_steps: int = 1
    feature_delta: bool = True
    pool_factor: float = 5.0
    flip_cap: int | None = None
    ent_mode: str = "binary"
    select: str = "val"
    select_start: float = 0.25

    def validate(self) -> None:
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be positive")
        if self.weight_decay < 0 or self.lam < 0:
            problems.append("weight_decay and lam must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            problems.append("rho must lie in [0, 1]")
        if self.budget_ratio < 0 or (self.budget is not None and self.budget < 0):
            problems.append("budget must be >= 0")
        if self.epochs < 1 or self.em_iters < 1 or self.model_steps < 1 or self.graph_steps < 1:
            problems.append("epochs, em_iters, model_steps, graph_steps must be >= 1")
        if not 0.0 < self.tau < 1.0:
            problems.append("tau must lie in (0, 1)")
        if self.grl_scale < 0:
            problems.append("grl_scale must be >= 0")
        if self.select not in ("val", "last"):
            problems.append("select must be 'val' or 'last'")
        if not self.hidden or min(self.hidden) < 1:
            problems.append("hidden dims must be positive")
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"invalid training config: unknown keys {unknown}")
        data = dict(data)
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def effective(self) -> "TrainConfig":
        """Resolve ablation variants to the flags they stand for."""
        if self.variant == "no_mr":
            return replace(self, rho=0.0)
        if self.variant == "no_gr":
            return replace(self, budget=0, budget_ratio=0.0, feature_delta=False)
        if self.variant == "no_adapt":
            return replace(self, lam=0.0, rho=0.0, budget=0, budget_ratio=0.0, feature_delta=False)
        if self.variant == "threshold":
            return replace(self, lam=0.0)
        return self


@dataclass
class EpochState:
    epoch: int
    phase: str
    mixture: BetaMixture | None
    posteriors: tuple | None
    remaining_budget: int


@dataclass
class TrainResult:
    model: gm.GraphModel
    target: LabeledGraph
    report: EvalReport
    metrics: list[dict]
    best_epoch: int
    flips: list[tuple[int, int, float, int]]
    final_adjacency: object
    feature_delta: np.ndarray
    split: SplitIndices
    config: TrainConfig
    embeddings_before: np.ndarray = field(repr=False, default=None)
    embeddings_after: np.ndarray = field(repr=False, default=None)


class LossProblem:
    """Arrays and flags shared by every forward pass of one run."""

    def __init__(self, pair: DomainPair, cfg: TrainConfig, split: SplitIndices):
        self.pair = pair
        self.cfg = cfg
        self.split = split
        self.src = pair.source
        self.train_idx = split.train
        self.train_labels = pair.source.labels[split.train]
        self.adapt = cfg.variant != "no_adapt"
        self.with_unknown = cfg.variant != "threshold"
        self.known_count = pair.known_count

    def losses(self, tape: Tape, nodes: dict, model: gm.GraphModel, tgt_adj, tgt_x, posteriors,
               grl_scale: float):
        """Total loss node and its breakdown. ``tgt_x`` is a node."""
        z_s = gm.forward_extractor(tape, self.src.adjacency, tape.const(self.src.features), nodes, model)
        logits_s = gm.classify(tape, tape.take_rows(z_s, self.train_idx), nodes, self.with_unknown)
        cls = cls_loss(tape, logits_s, self.train_labels, self.cfg.lam,
                       None if self.with_unknown else self.known_count)
        if not self.adapt:
            v = float(cls.value[0, 0])
            return cls, LossBreakdown(0.0, v, 0.0, v)
        z_t = gm.forward_extractor(tape, tgt_adj, tgt_x, nodes, model)
        disc = gm.discriminate(tape, tape.concat_rows(z_s, z_t), nodes, model, reverse=True, grl_scale=grl_scale)
        adv = adv_loss(tape, disc, self.src.n, posteriors)
        logits_t = gm.classify(tape, z_t, nodes, self.with_unknown)
        disc_t = gm.discriminate(tape, z_t, nodes, model, reverse=False)
        ent = ent_loss(tape, logits_t, disc_t, posteriors, self.cfg.ent_mode)
        total = tape.add(tape.add(adv, cls), ent)
        parts = LossBreakdown(float(adv.value[0, 0]), float(cls.value[0, 0]), float(ent.value[0, 0]),
                              float(total.value[0, 0]))
        return total, parts


def _check_finite(epoch: int, parts: LossBreakdown) -> None:
    for term in ("adv", "cls", "ent", "total"):
        v = getattr(parts, term)
        if not math.isfinite(v):
            raise TrainingAborted(epoch, term, v)


def fit_posteriors(model: gm.GraphModel, adj, features, em_iters: int):
    known_logits = gm.logits(model, adj, features, with_unknown=False)
    mix = fit_beta_mixture_em(compute_entropy(known_logits), em_iters)
    return mix, posterior_known(mix, compute_entropy(known_logits).normalized)


def _validation(model, prob: LossProblem, tgt_adj, tgt_x, posteriors) -> tuple[float, float | None]:
    threshold = prob.cfg.tau if prob.cfg.variant == "threshold" else None
    src = prob.src
    valid = prob.split.valid if len(prob.split.valid) else prob.split.train
    pred_s = predict(model, src.adjacency, src.features, threshold)
    acc_val = float((pred_s[valid] == src.labels[valid]).mean())
    if posteriors is None:
        return acc_val, None
    pred_t = predict(model, tgt_adj, tgt_x, threshold)
    consistency = float(((pred_t == prob.known_count) == (posteriors[1] > 0.5)).mean())
    return acc_val, h_score(acc_val, consistency)


def resolve_budget(cfg: TrainConfig, edge_count: int) -> int:
    if cfg.budget is not None:
        return int(cfg.budget)
    return int(round(cfg.budget_ratio * edge_count))


def run_training(pair: DomainPair, config: TrainConfig, out_dir=None) -> TrainResult:
    """Train on ``pair`` and evaluate on its held-out target labels.

    Each epoch runs a model phase (mask scoring, mask rebuild, optimizer steps
    on model weights) and then a graph phase (mixture refit, feature-delta
    steps, edge flips) with the model frozen. With ``out_dir`` the run writes
    ``metrics.jsonl``, ``edits.log``, ``checkpoint.bin`` and ``report.json``.
    """
    config.validate()
    cfg = config.effective()
    split = split_source(pair.source, pair.known_count, cfg.seed)
    prob = LossProblem(pair, cfg, split)
    tgt0 = pair.target
    dims = [tgt0.features.shape[1], *cfg.hidden]
    if pair.source.features.shape[1] != dims[0]:
        raise ValueError(f"source has {pair.source.features.shape[1]} features, target {dims[0]}")
    model = gm.init_params(dims, pair.known_count, cfg.seed, cfg.disc_hidden, cfg.slope, cfg.grl_scale)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("metrics.jsonl", "edits.log"):
            (out / name).write_text("")

    tgt_adj = tgt0.adjacency
    delta = np.zeros_like(tgt0.features)
    budget = resolve_budget(cfg, tgt_adj.edge_count) if prob.adapt else 0
    edits = EdgeEditSet(budget)
    flip_cap = cfg.flip_cap if cfg.flip_cap is not None else max(1, budget // 50)
    pool = None
    if budget > 0:
        pool = build_candidate_pool(tgt_adj, int(cfg.pool_factor * tgt_adj.edge_count), stream(cfg.seed, "sampling"))
    train_delta = prob.adapt and cfg.feature_delta
    model_opt = AdamW(cfg.learning_rate, cfg.weight_decay)
    delta_opt = AdamW(cfg.learning_rate, cfg.weight_decay)

    mixture, posteriors = None, None
    if prob.adapt:
        mixture, posteriors = fit_posteriors(model, tgt_adj, tgt0.features, cfg.em_iters)

    metrics: list[dict] = []
    flips_log: list[tuple[int, int, float, int]] = []
    best = None
    select_from = int(cfg.select_start * cfg.epochs)

    for epoch in range(cfg.epochs):
        grl = cfg.grl_scale * (min(1.0, epoch / max(1.0, cfg.epochs / 4)) if cfg.grl_warmup else 1.0)
        tgt_x = tgt0.features + delta

        # model phase
        if cfg.rho > 0:
            scoring = model.copy()
            scoring.masks = [np.ones_like(w) for w in scoring.weights]
            tape = Tape()
            nodes = gm.bind(scoring, tape, trainable=False, masks_trainable=True)
            total, _ = prob.losses(tape, nodes, scoring, tgt_adj, tape.const(tgt_x), posteriors, grl)
            tape.backward(total)
            scores = score_importance([nodes[f"M{i}"] for i in range(len(model.weights))])
            apply_masks(model, build_masks(scores, cfg.rho))
        for _ in range(cfg.model_steps):
            tape = Tape()
            nodes = gm.bind(model, tape)
            total, parts = prob.losses(tape, nodes, model, tgt_adj, tape.const(tgt_x), posteriors, grl)
            _check_finite(epoch, parts)
            tape.backward(total)
            params = model.params()
            model.set_params(model_opt.step(params, {k: nodes[k].grad for k in params}))
        phase = "model"

        # graph phase
        committed = []
        if prob.adapt:
            phase = "graph"
            mixture, posteriors = fit_posteriors(model, tgt_adj, tgt_x, cfg.em_iters)
            for step in range(cfg.graph_steps):
                if not train_delta and edits.remaining <= 0:
                    break
                tape = Tape()
                nodes = gm.bind(model, tape, trainable=False)
                # tracked even when frozen so that propagation nodes carry gradients for edge scoring
                delta_node = tape.param(delta)
                x_node = tape.add(tape.const(tgt0.features), delta_node)
                g_total, g_parts = prob.losses(tape, nodes, model, tgt_adj, x_node, posteriors, grl)
                _check_finite(epoch, g_parts)
                tape.backward(g_total)
                if step == 0 and edits.remaining > 0 and pool is not None:
                    pool = pool.without(edits.used())
                    if len(pool.existing) + len(pool.sampled_nonedges):
                        pairs, scores = score_edge_flips(pool, tape, tgt_adj)
                        committed = select_flips(pairs, scores, min(edits.remaining, flip_cap))
                if train_delta:
                    delta = delta_opt.step({"delta": delta}, {"delta": delta_node.grad})["delta"]
            if committed:
                if out is not None:
                    append_edit_log(out / "edits.log", epoch, committed, tgt_adj)
                for u, v, s in committed:
                    flips_log.append((u, v, s, epoch))
                    edits.flips.append((u, v))
                    edits.scores[(u, v)] = s
                tgt_adj = commit_flips(tgt_adj, [(u, v) for u, v, _ in committed])
            tgt_x = tgt0.features + delta

        state = EpochState(epoch, phase, mixture, posteriors, edits.remaining)
        acc_val, h_val = _validation(model, prob, tgt_adj, tgt_x, posteriors)
        record = {
            "epoch": epoch,
            "phase": state.phase,
            **parts.as_dict(),
            "acc_val": acc_val,
            "h_val": h_val,
            **_mixture_fields(mixture),
            "flips_committed": len(edits.flips),
            "mask_zero_frac": float(np.mean([(m == 0).mean() for m in model.masks])),
        }
        metrics.append(record)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

        score = h_val if h_val is not None else acc_val
        eligible = cfg.select == "last" or epoch >= select_from
        if eligible and (best is None or cfg.select == "last" or score > best[0]):
            best = (score, epoch, model.copy(), tgt_adj, delta.copy(), len(edits.flips))

    _, best_epoch, best_model, best_adj, best_delta, best_nflips = best
    report, target, embeddings_before, embeddings_after = final_report(
        pair, cfg, best_model, best_adj, best_delta, best_epoch, best_nflips)

    best_model.meta = {"variant": cfg.variant, "tau": cfg.tau, "best_epoch": best_epoch,
                       "config": cfg.to_dict()}
    result = TrainResult(
        model=best_model,
        target=target,
        report=report,
        metrics=metrics,
        best_epoch=best_epoch,
        flips=flips_log,
        final_adjacency=tgt_adj,
        feature_delta=best_delta,
        split=split,
        config=cfg,
        embeddings_before=embeddings_before,
        embeddings_after=embeddings_after,
    )
    if out is not None:
        write_run_artifacts(out, result, best_nflips)
    return result


def final_report(pair: DomainPair, cfg: TrainConfig, model: gm.GraphModel, adj, delta: np.ndarray,
                 best_epoch: int, n_flips: int):
    """Score a selected snapshot on the reprogrammed target.

    Returns ``(report, target, embeddings_before, embeddings_after)``; the
    "before" embeddings come from the untrained initial model on the
    original target graph.
    """
    cfg = cfg.effective()
    tgt0 = pair.target
    target = tgt0.with_graph(adj, tgt0.features + delta)
    threshold = cfg.tau if cfg.variant == "threshold" else None
    report = evaluate(model, target, threshold=threshold)
    initial = gm.init_params([tgt0.features.shape[1], *cfg.hidden], pair.known_count, cfg.seed,
                             cfg.disc_hidden, cfg.slope, cfg.grl_scale)
    embeddings_before = gm.embed(initial, tgt0.adjacency, tgt0.features)
    embeddings_after = gm.embed(model, adj, target.features)
    unknown = tgt0.labels >= pair.known_count
    report.mmd_before = group_mmd(embeddings_before, unknown)
    report.mmd_after = group_mmd(embeddings_after, unknown)
    split = split_source(pair.source, pair.known_count, cfg.seed)
    src = pair.source
    pred_s = predict(model, src.adjacency, src.features, threshold)
    if len(split.sanity):
        report.extra["acc_sanity"] = float((pred_s[split.sanity] == src.labels[split.sanity]).mean())
    report.extra["best_epoch"] = int(best_epoch)
    report.extra["flips"] = int(n_flips)
    return report, target, embeddings_before, embeddings_after


def _mixture_fields(mix: BetaMixture | None) -> dict:
    keys = ("alpha_tk", "beta_tk", "alpha_tu", "beta_tu", "mix_tk")
    if mix is None:
        return dict.fromkeys(keys)
    return {k: float(getattr(mix, k)) for k in keys}


def write_run_artifacts(out: Path, result: TrainResult, n_flips: int) -> None:
    flips = np.array([(u, v) for u, v, _, _ in result.flips[:n_flips]], dtype=np.int64).reshape(-1, 2)
    gm.save_checkpoint(out / "checkpoint.bin", result.model,
                       extra={"feature_delta": result.feature_delta, "flips": flips})
    (out / "report.json").write_text(result.report.to_json() + "\n")
