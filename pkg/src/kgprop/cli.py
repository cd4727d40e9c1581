"""Command-line entry point: ``kgprop <command> [flags]``.

Exit codes: 0 on success, 1 on validation or usage errors, 2 on numeric
failure. Every command prints a ``manifest-hash`` line identifying the
resolved configuration and input files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from kgprop.diff_core import AdamConfig, load_checkpoint, save_checkpoint
from kgprop.errors import KGPropError, NonFiniteValue, ValidationError
from kgprop.experiments import gradcheck_run
from kgprop.knowledge_graph import EdgeKind, GraphBuildConfig, Taxonomy, TypedGraph, build_typed_graph, load_mapping
from kgprop.propagation import GraphContext, ModelConfig, PropagationNet
from kgprop.semantic_space import LabelVocabulary, load_embeddings
from kgprop.synth import SynthConfig, manifest_hash, synth_generate
from kgprop.training import (
    Dataset,
    EvalConfig,
    TrainConfig,
    evaluate,
    evaluate_per_timestep,
    load_matrix,
    per_timestep_csv,
    predict_all,
    probability_trace,
    save_matrix,
    trace_csv,
    train,
    write_text,
    zsl_evaluate,
)

INPUT_KEYS = ("vocab", "embeddings", "taxonomy", "graph", "train", "val", "test")
# destinations do not change what a run computes
OUTPUT_KEYS = ("func", "out", "history", "per_timestep")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ------------------------------------------------------------- helpers


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def run_hash(command: str, args: argparse.Namespace, files: dict) -> str:
    """Hash of the command, its non-path flags and the input file contents."""
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in OUTPUT_KEYS and k not in files}
    body = {"command": command, "flags": flags,
            "inputs": {k: _file_digest(p) for k, p in sorted(files.items())
                       if isinstance(p, (str, Path)) and Path(p).is_file()}}
    return manifest_hash(body)


def announce(command: str, args, files: dict) -> str:
    h = run_hash(command, args, files)
    print(f"manifest-hash: {h}")
    return h


def resolve_inputs(args) -> dict:
    """Merge ``--manifest`` paths with explicit flags; flags win."""
    paths = {k: getattr(args, k, None) for k in INPUT_KEYS}
    d_emb = getattr(args, "d_emb", None)
    if getattr(args, "manifest", None):
        mpath = Path(args.manifest)
        try:
            doc = json.loads(mpath.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{mpath}: {exc}") from None
        for k in INPUT_KEYS:
            if paths[k] is None and k in doc:
                paths[k] = str(mpath.parent / doc[k])
        if d_emb is None:
            d_emb = doc.get("d_emb")
    paths["d_emb"] = d_emb
    return paths


def load_context(paths: dict) -> GraphContext:
    for k in ("vocab", "embeddings", "graph"):
        if paths.get(k) is None:
            raise UsageError(f"missing input: --{k} (or --manifest)")
    if paths["d_emb"] is None:
        raise UsageError("missing --d-emb (or --manifest)")
    vocab = LabelVocabulary.load(paths["vocab"])
    emb = load_embeddings(paths["embeddings"], vocab, int(paths["d_emb"]))
    return GraphContext(vocab, emb, TypedGraph.load(paths["graph"]))


def load_model(path) -> tuple[PropagationNet, dict]:
    store, hyper = load_checkpoint(path)
    if "model" not in hyper:
        raise ValidationError(f"{path}: checkpoint lacks model hyperparameters")
    return PropagationNet(ModelConfig.from_dict(hyper["model"]), params=store), hyper


def eval_config(args, hyper: dict | None = None) -> EvalConfig:
    thr = args.threshold
    if thr is None:
        thr = (hyper or {}).get("threshold", 0.5)
    return EvalConfig(args.mode, thr, args.k)


def emit(text: str, out) -> None:
    if out:
        write_text(out, text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------ commands


def cmd_graph_build(args) -> None:
    files = {"taxonomy": args.taxonomy, "vocab": args.vocab, "mapping": args.mapping}
    announce("graph-build", args, files)
    tax = Taxonomy.load(args.taxonomy)
    vocab = LabelVocabulary.load(args.vocab)
    mapping = load_mapping(args.mapping) if args.mapping else None
    g = build_typed_graph(tax, vocab, mapping, GraphBuildConfig(args.theta_pos, args.theta_neg))
    g.save(args.out)
    print(" ".join(f"{k.value}={g.count(k)}" for k in EdgeKind))


def cmd_synth(args) -> None:
    cfg = SynthConfig(
        seed=args.seed, num_seen=args.num_seen, num_unseen=args.num_unseen, d_feat=args.d_feat, d_emb=args.d_emb,
        taxonomy_branching=args.branching, feature_noise=args.noise, label_density=args.density,
        correlation_strength=args.correlation, hidden_fraction=args.hidden_fraction,
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
    )
    manifest = synth_generate(cfg).save(args.out)
    print(f"manifest-hash: {manifest['manifest_hash']}")
    print(f"wrote {Path(args.out) / 'manifest.json'}")


def cmd_train(args) -> None:
    paths = resolve_inputs(args)
    h = announce("train", args, paths)
    ctx = load_context(paths)
    if paths["train"] is None:
        raise UsageError("missing input: --train (or --manifest)")
    train_set = Dataset.load(paths["train"])
    val_set = Dataset.load(paths["val"]) if paths["val"] else None
    mcfg = ModelConfig(
        d_feat=train_set.d_feat, d_emb=ctx.emb.dim, d_hid=args.d_hid, T=args.T, fi_hidden=args.fi_hidden,
        fo_hidden=args.fo_hidden, relation_rank=args.rank, tie_symmetric=not args.untied,
    )
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, optimizer=args.optimizer,
                       adam=AdamConfig(lr=args.lr), sgd_lr=args.sgd_lr, seed=args.seed,
                       keep_best=not args.no_keep_best)
    model = PropagationNet(mcfg, seed=args.seed)
    res = train(model, ctx, train_set, val_set, tcfg)
    hyper = {"model": mcfg.to_dict(), "threshold": res.threshold, "best_epoch": res.best_epoch,
             "train": {"epochs": args.epochs, "batch_size": args.batch_size, "optimizer": args.optimizer,
                       "lr": args.lr, "sgd_lr": args.sgd_lr, "seed": args.seed},
             "manifest_hash": h}
    save_checkpoint(args.out, res.params, hyper)
    if args.history:
        write_text(args.history, res.history_csv())
    if res.history:
        last = res.history[-1]
        print(f"epochs={len(res.history)} final_loss={last.train_loss:.6g} threshold={res.threshold}")
    print(f"wrote {args.out}")


def cmd_predict(args) -> None:
    paths = resolve_inputs(args)
    data = args.data or paths.get("test")
    announce("predict", args, {**paths, "checkpoint": args.checkpoint, "data": data})
    if data is None:
        raise UsageError("missing input: --data")
    model, _ = load_model(args.checkpoint)
    ctx = load_context(paths)
    if not args.zsl:
        ctx = ctx.seen_only()
    X = Dataset.load(data).X
    P = predict_all(model, ctx, X, zsl_mask=args.zsl)
    save_matrix(args.out, P[args.step])
    print(f"wrote {args.out} ({P.shape[1]} x {P.shape[2]}, t={args.step % P.shape[0]})")


def cmd_eval(args) -> None:
    files = {"pred": args.pred, "truth": args.truth, "checkpoint": args.checkpoint}
    paths = resolve_inputs(args) if args.checkpoint else {}
    announce("eval", args, {**paths, **files})
    truth = Dataset.load(args.truth)
    hyper = None
    if args.pred:
        p_all = load_matrix(args.pred)[None]
    elif args.checkpoint:
        model, hyper = load_model(args.checkpoint)
        ctx = load_context(paths)
        ctx = ctx if truth.m == len(ctx.vocab) else ctx.seen_only()
        p_all = predict_all(model, ctx, truth.X, zsl_mask=ctx.vocab.unseen_count > 0)
    else:
        raise UsageError("eval needs --pred or --checkpoint")
    cfg = eval_config(args, hyper)
    report = evaluate(p_all[-1], truth.Y, cfg)
    for name, value in report.rows():
        print(f"{name} = {value}")
    if args.out:
        write_text(args.out, report.to_csv())
    if args.per_timestep:
        write_text(args.per_timestep, per_timestep_csv(evaluate_per_timestep(p_all, truth.Y, cfg)))


def cmd_zsl_eval(args) -> None:
    paths = resolve_inputs(args)
    data = args.data or paths.get("test")
    announce("zsl-eval", args, {**paths, "checkpoint": args.checkpoint, "data": data})
    if data is None:
        raise UsageError("missing input: --data")
    model, hyper = load_model(args.checkpoint)
    report = zsl_evaluate(model, load_context(paths), Dataset.load(data), args.zsl_mode, eval_config(args, hyper))
    for name, value in report.rows():
        print(f"{name} = {value}")
    if args.out:
        write_text(args.out, report.to_csv())


def cmd_trace(args) -> None:
    paths = resolve_inputs(args)
    data = args.data or paths.get("test")
    announce("trace", args, {**paths, "checkpoint": args.checkpoint, "data": data})
    if data is None:
        raise UsageError("missing input: --data")
    model, _ = load_model(args.checkpoint)
    ctx = load_context(paths)
    ds = Dataset.load(data)
    if not 0 <= args.index < len(ds):
        raise ValidationError(f"--index {args.index} outside 0..{len(ds) - 1}")
    labels = [s for s in args.labels.split(",") if s]
    rows = probability_trace(model, ctx, ds.X[args.index], labels, zsl_mask=ctx.vocab.unseen_count > 0)
    emit(trace_csv(rows), args.out)


def cmd_gradcheck(args) -> None:
    announce("gradcheck", args, {})
    rep = gradcheck_run(args.seed, d_hid=args.d_hid, T=args.T, relation_rank=args.rank,
                        tie_symmetric=not args.untied, fo_hidden=args.fo_hidden, n_labels=args.labels,
                        step=args.step, rel_tol=args.rel_tol, abs_floor=args.abs_floor)
    print(rep.summary())
    if not rep.passed:
        raise SystemExit(2)


# -------------------------------------------------------------- parser


def _inputs(p, data=False):
    p.add_argument("--manifest", help="manifest.json written by `synth`; explicit flags override it")
    p.add_argument("--vocab", help="label vocabulary file")
    p.add_argument("--embeddings", help="word-vector text file")
    p.add_argument("--d-emb", type=int, help="embedding dimension")
    p.add_argument("--graph", help="typed graph JSON")
    if data:
        p.add_argument("--data", help="dataset file (defaults to the manifest's test split)")


def _eval_flags(p):
    p.add_argument("--mode", choices=("threshold", "topk"), default="threshold", help="binarization rule")
    p.add_argument("--threshold", type=float, help="global threshold (default: the checkpoint's, else 0.5)")
    p.add_argument("--k", type=int, default=3, help="labels per instance in topk mode")
    p.add_argument("--out", help="write metrics CSV here")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="kgprop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("graph-build", help="typed label graph from a taxonomy")
    p.add_argument("--taxonomy", required=True, help="child<TAB>parent edges")
    p.add_argument("--vocab", required=True, help="label vocabulary file")
    p.add_argument("--mapping", help="label<TAB>concept file; labels name concepts directly when omitted")
    p.add_argument("--theta-pos", type=float, default=0.8, help="similarity at or above which pairs are positive")
    p.add_argument("--theta-neg", type=float, default=0.3, help="similarity at or below which pairs are negative")
    p.add_argument("--out", required=True, help="output graph JSON")
    p.add_argument("--seed", type=int, default=0, help="accepted on every command; this one draws no random numbers")
    p.set_defaults(func=cmd_graph_build)

    p = sub.add_parser("synth", help="generate a synthetic corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--num-seen", type=int, default=12, help="seen labels")
    p.add_argument("--num-unseen", type=int, default=0, help="unseen labels")
    p.add_argument("--d-feat", type=int, default=16, help="feature dimension")
    p.add_argument("--d-emb", type=int, default=8, help="embedding dimension")
    p.add_argument("--branching", type=int, default=4, help="labels per taxonomy family")
    p.add_argument("--noise", type=float, default=0.5, help="feature noise standard deviation")
    p.add_argument("--density", type=float, default=0.25, help="mean label frequency")
    p.add_argument("--correlation", type=float, default=0.9, help="co-occurrence strength in [0, 1]")
    p.add_argument("--hidden-fraction", type=float, default=0.0, help="share of labels with no feature signal")
    p.add_argument("--n-train", type=int, default=256, help="training instances")
    p.add_argument("--n-val", type=int, default=128, help="validation instances")
    p.add_argument("--n-test", type=int, default=256, help="test instances")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on seen labels and write a checkpoint")
    _inputs(p)
    p.add_argument("--train", help="training dataset")
    p.add_argument("--val", help="validation dataset for threshold selection")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="write per-epoch CSV here")
    p.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed")
    p.add_argument("--d-hid", type=int, default=5, help="belief state size")
    p.add_argument("--T", type=int, default=5, help="propagation steps")
    p.add_argument("--fi-hidden", type=int, default=16, help="input network hidden width")
    p.add_argument("--fo-hidden", type=int, default=0, help="output network hidden width (0 = linear)")
    p.add_argument("--rank", type=int, default=0, help="relation tensor rank (0 = full)")
    p.add_argument("--untied", action="store_true", help="store both relation block triangles")
    p.add_argument("--epochs", type=int, default=100, help="training epochs")
    p.add_argument("--batch-size", type=int, default=32, help="mini-batch size")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam", help="update rule")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--sgd-lr", type=float, default=0.1, help="SGD learning rate")
    p.add_argument("--no-keep-best", action="store_true", help="keep final rather than best-validation parameters")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write label confidences for a dataset")
    _inputs(p, data=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint from `train`")
    p.add_argument("--out", required=True, help="prediction matrix path")
    p.add_argument("--zsl", action="store_true", help="score unseen labels through the masked graph")
    p.add_argument("--step", type=int, default=-1, help="propagation step to export (default: last)")
    p.add_argument("--seed", type=int, default=0, help="accepted on every command; this one draws no random numbers")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="micro precision/recall/F1")
    _inputs(p)
    p.add_argument("--truth", required=True, help="dataset with ground-truth targets")
    p.add_argument("--pred", help="prediction matrix from `predict`")
    p.add_argument("--checkpoint", help="score a checkpoint directly instead of --pred")
    p.add_argument("--per-timestep", help="with --checkpoint: write t,precision,recall,f1 CSV here")
    _eval_flags(p)
    p.add_argument("--seed", type=int, default=0, help="accepted on every command; this one draws no random numbers")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zsl-eval", help="zero-shot or generalized evaluation")
    _inputs(p, data=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint from `train`")
    p.add_argument("--zsl-mode", choices=("unseen_only", "generalized"), default="unseen_only",
                   help="score unseen labels only or all labels")
    _eval_flags(p)
    p.add_argument("--seed", type=int, default=0, help="accepted on every command; this one draws no random numbers")
    p.set_defaults(func=cmd_zsl_eval)

    p = sub.add_parser("trace", help="per-step confidences for chosen labels of one instance")
    _inputs(p, data=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint from `train`")
    p.add_argument("--index", type=int, default=0, help="instance row in the dataset")
    p.add_argument("--labels", required=True, help="comma-separated label names")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--seed", type=int, default=0, help="accepted on every command; this one draws no random numbers")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training loss")
    p.add_argument("--seed", type=int, default=0, help="random model, graph and batch seed")
    p.add_argument("--d-hid", type=int, default=2, help="belief state size")
    p.add_argument("--T", type=int, default=2, help="propagation steps")
    p.add_argument("--rank", type=int, default=0, help="relation tensor rank (0 = full)")
    p.add_argument("--untied", action="store_true", help="store both relation block triangles")
    p.add_argument("--fo-hidden", type=int, default=0, help="output network hidden width")
    p.add_argument("--labels", type=int, default=5, help="graph nodes")
    p.add_argument("--step", type=float, default=1e-5, help="central difference step")
    p.add_argument("--rel-tol", type=float, default=1e-4, help="relative error tolerance")
    p.add_argument("--abs-floor", type=float, default=1e-7, help="absolute errors below this are ignored")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except NonFiniteValue as exc:
        print(f"kgprop: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (KGPropError, UsageError, OSError) as exc:
        print(f"kgprop: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
