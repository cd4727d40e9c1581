"""Desk-scale experiment runners shared by the CLI and the acceptance suite.

Each runner is deterministic in its seed and returns plain numbers, so the
callers decide how to report them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from kgprop.diff_core import GradCheckReport, finite_diff_check
from kgprop.knowledge_graph import Edge, EdgeKind, TypedGraph
from kgprop.propagation import GraphContext, ModelConfig, PropagationNet
from kgprop.semantic_space import EmbeddingTable, LabelVocabulary
from kgprop.synth import SynthConfig, SynthCorpus, synth_generate
from kgprop.training import (
    EvalConfig,
    MetricReport,
    TrainConfig,
    TrainResult,
    evaluate,
    evaluate_per_timestep,
    loss_and_grad,
    marginal_baseline_scores,
    predict_all,
    select_threshold,
    train,
)

# ---------------------------------------------------------------- gradcheck


def random_context(rng: np.random.Generator, n_seen: int, n_unseen: int = 0, d_emb: int = 4,
                   n_edges: int | None = None) -> GraphContext:
    """Random vocabulary, embeddings and a graph cycling through all edge kinds."""
    n = n_seen + n_unseen
    vocab = LabelVocabulary.from_split([f"s{i}" for i in range(n_seen)], [f"u{i}" for i in range(n_unseen)])
    emb = EmbeddingTable(rng.normal(size=(n, d_emb)))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    n_edges = n_edges if n_edges is not None else max(3, len(pairs) // 2)
    chosen = rng.choice(len(pairs), size=min(n_edges, len(pairs)), replace=False)
    kinds = list(EdgeKind)
    edges = []
    for k, c in enumerate(chosen):
        i, j = pairs[c]
        kind = kinds[k % 3]
        if kind is EdgeKind.SUPER_SUB and rng.random() < 0.5:
            i, j = j, i
        edges.append(Edge(i, j, kind))
    return GraphContext(vocab, emb, TypedGraph(n, edges))


def gradcheck_run(seed: int, d_hid: int = 2, T: int = 2, relation_rank: int = 0, tie_symmetric: bool = True,
                  fo_hidden: int = 0, n_labels: int = 5, batch: int = 3, d_feat: int = 3, d_emb: int = 4,
                  step: float = 1e-5, rel_tol: float = 1e-4, abs_floor: float = 1e-7) -> GradCheckReport:
    """Finite-difference check of the full training loss on a random graph."""
    rng = np.random.default_rng(seed)
    ctx = random_context(rng, n_labels, d_emb=d_emb)
    cfg = ModelConfig(d_feat=d_feat, d_emb=d_emb, d_hid=d_hid, T=T, fi_hidden=4, fo_hidden=fo_hidden,
                      relation_rank=relation_rank, tie_symmetric=tie_symmetric)
    model = PropagationNet(cfg, seed=seed)
    X = rng.normal(size=(batch, d_feat))
    Y = rng.integers(0, 2, size=(batch, n_labels))

    def loss(store):
        store.zero_grad()
        return loss_and_grad(model, ctx, X, Y)

    return finite_diff_check(loss, model.params, step=step, rel_tol=rel_tol, abs_floor=abs_floor)


# ------------------------------------------------------------- training


def corpus_context(c: SynthCorpus) -> GraphContext:
    return GraphContext(c.vocab, c.emb, c.graph)


def fit(c: SynthCorpus, model_cfg: ModelConfig, train_cfg: TrainConfig, stop=None) -> tuple[PropagationNet, TrainResult]:
    model = PropagationNet(model_cfg, seed=train_cfg.seed)
    res = train(model, corpus_context(c), c.train, c.val, train_cfg, stop=stop)
    return model, res


@dataclass
class OverfitResult:
    train_f1: float
    threshold: float
    epochs: int
    seconds: float


def overfit_run(seed: int = 1, n_train: int = 256, num_seen: int = 12, d_hid: int = 5, T: int = 5,
                max_epochs: int = 2000, target: float = 0.95, check_every: int = 25) -> OverfitResult:
    """Train without best-epoch restore until training F1 reaches ``target``.

    The threshold is the one selected on the validation split at the
    epoch being scored.
    """
    c = synth_generate(SynthConfig(seed=seed, num_seen=num_seen, d_feat=16, d_emb=8, n_train=n_train))
    ctx = corpus_context(c).seen_only()
    model = PropagationNet(ModelConfig(d_feat=16, d_emb=8, d_hid=d_hid, T=T), seed=seed)
    state = {"f1": 0.0, "thr": 0.5}

    def score() -> None:
        thr = select_threshold(predict_all(model, ctx, c.val.X)[-1], c.val.Y)
        p = predict_all(model, ctx, c.train.X)[-1]
        state["f1"], state["thr"] = evaluate(p, c.train.Y, EvalConfig("threshold", thr)).f1, thr

    def stop(rec) -> bool:
        if rec.epoch % check_every:
            return False
        score()
        return state["f1"] >= target

    t0 = time.perf_counter()
    res = train(model, corpus_context(c), c.train, None,
                TrainConfig(epochs=max_epochs, seed=seed, keep_best=False), stop=stop)
    if len(res.history) % check_every:
        score()
    return OverfitResult(state["f1"], state["thr"], len(res.history), time.perf_counter() - t0)


# ----------------------------------------------------- propagation ablation

# weak parent mixing keeps a hidden label's embedding from pointing at its
# family's feature signatures, so the family link lives in the graph alone
ABLATION_SYNTH = SynthConfig(num_seen=20, hidden_fraction=0.3, correlation_strength=0.9, d_feat=16, d_emb=8,
                             feature_noise=0.5, embedding_parent_weight=0.3, n_train=2000, n_val=500, n_test=500)
ABLATION_FI_HIDDEN = 4
ABLATION_EPOCHS = 100


@dataclass
class AblationRun:
    seed: int
    T: int
    f1: float
    threshold: float
    best_epoch: int | None
    per_timestep: list[tuple[int, MetricReport]] = field(default_factory=list)
    seconds: float = 0.0


def ablation_run(seed: int, T: int, epochs: int = ABLATION_EPOCHS, synth: SynthConfig = ABLATION_SYNTH,
                 fi_hidden: int = ABLATION_FI_HIDDEN) -> AblationRun:
    """Train one model on the hidden-signal corpus and score it on test."""
    c = synth_generate(replace(synth, seed=seed))
    cfg = ModelConfig(d_feat=synth.d_feat, d_emb=synth.d_emb, d_hid=5, T=T, fi_hidden=fi_hidden)
    t0 = time.perf_counter()
    model, res = fit(c, cfg, TrainConfig(epochs=epochs, seed=seed, eval_every=5))
    ectx = corpus_context(c)
    p_all = predict_all(model, ectx, c.test.X)
    ecfg = EvalConfig("threshold", res.threshold)
    return AblationRun(seed, T, evaluate(p_all[-1], c.test.Y, ecfg).f1, res.threshold, res.best_epoch,
                       evaluate_per_timestep(p_all, c.test.Y, ecfg), time.perf_counter() - t0)


# -------------------------------------------------------------- zero-shot

ZSL_SYNTH = SynthConfig(num_seen=20, num_unseen=5, correlation_strength=0.9, d_feat=16, d_emb=8,
                        feature_noise=0.5, n_train=2000, n_val=500, n_test=500)
ZSL_EPOCHS = 60


@dataclass
class ZslRun:
    seed: int
    unseen_f1: float
    baseline_f1: float
    seen_only_f1: float
    generalized_seen_f1: float
    generalized_f1: float
    seconds: float = 0.0


def best_constant_f1(Y: np.ndarray, scores: np.ndarray) -> float:
    """F1 of ``scores`` at the threshold that is best on ``Y`` itself."""
    return evaluate(scores, Y, EvalConfig("threshold", select_threshold(scores, Y))).f1


def zsl_run(seed: int, epochs: int = ZSL_EPOCHS, synth: SynthConfig = ZSL_SYNTH, T: int = 5,
            fi_hidden: int = 16) -> ZslRun:
    """Seen-trained model scored on unseen labels through the masked graph.

    The baseline scores every test instance with each unseen label's test
    frequency and gets its own best threshold, so it is an upper bound on
    any frequency-only predictor.
    """
    c = synth_generate(replace(synth, seed=seed))
    cfg = ModelConfig(d_feat=synth.d_feat, d_emb=synth.d_emb, d_hid=5, T=T, fi_hidden=fi_hidden)
    t0 = time.perf_counter()
    model, res = fit(c, cfg, TrainConfig(epochs=epochs, seed=seed, eval_every=5))
    s = c.vocab.seen_count
    ecfg = EvalConfig("threshold", res.threshold)
    Yt = c.test.Y
    p_gen = predict_all(model, corpus_context(c), c.test.X, zsl_mask=True)[-1]
    p_seen = predict_all(model, corpus_context(c).seen_only(), c.test.X)[-1]
    base = best_constant_f1(Yt[:, s:], marginal_baseline_scores(Yt[:, s:], len(Yt)))
    return ZslRun(
        seed,
        evaluate(p_gen[:, s:], Yt[:, s:], ecfg).f1,
        base,
        evaluate(p_seen, Yt[:, :s], ecfg).f1,
        evaluate(p_gen[:, :s], Yt[:, :s], ecfg).f1,
        evaluate(p_gen, Yt, ecfg).f1,
        time.perf_counter() - t0,
    )
