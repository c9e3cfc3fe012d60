"""``vemfuse`` command line: prepare, pretrain, fuse, eval, densify-stats, diag.

Exit codes
----------
0  success
1  unexpected error
2  invalid input (dataset, config, arguments)
3  missing checkpoint
4  non-finite loss (a diagnostic dump is written to the run directory)

Artifacts go under ``--run-dir`` (default ``$VEMFUSE_RUN_DIR`` or ``./runs``).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import diffmath as dm
from . import losses as L
from .densify import densify
from .evaluation import dump_topk, eval_triples, evaluate, write_metrics, write_ranks
from .fixtures import (SyntheticSpec, generate_split_signal, tiny_graph, write_random_dataset,
                       write_split_signal)
from .kg import (DatasetError, KnowledgeGraph, TextStore, TripleSplit, augment_inverse,
                 degree_stats, load_dataset, relation_jaccard, sparsify)
from .structure import StructConfig, StructureModel
from .text import TextConfig, TextModel
from .trainer import (NonFiniteLoss, RunLog, TrainConfig, fuse, load_model_state, pretrain,
                      save_model, stream, stream_seed)

log = logging.getLogger("vemfuse")

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_NO_CHECKPOINT, EXIT_NONFINITE = 0, 1, 2, 3, 4


class MissingCheckpoint(FileNotFoundError):
    pass


# ----------------------------------------------------------------------
# bundles
# ----------------------------------------------------------------------
def save_bundle(directory: Path, graph: KnowledgeGraph, split: TripleSplit, stats: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / "bundle.npz", train=split.train, valid=split.valid, test=split.test,
             graph=graph.triples)
    vocab = {"entities": graph.entities, "relations": graph.relations,
             "entity_text": graph.text.entity_text, "relation_text": graph.text.relation_text,
             "max_len": graph.text.max_len, "n_base_relations": graph.n_base_relations,
             "augmented": graph.augmented, "unseen_entities": sorted(split.unseen_entities)}
    (directory / "vocab.json").write_text(json.dumps(vocab, indent=1) + "\n")
    (directory / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")


def load_bundle(directory: str | Path) -> tuple[KnowledgeGraph, TripleSplit]:
    d = Path(directory)
    if not (d / "bundle.npz").exists() or not (d / "vocab.json").exists():
        raise DatasetError("not a prepared bundle (run `vemfuse prepare`)", str(d))
    arrays = np.load(d / "bundle.npz")
    v = json.loads((d / "vocab.json").read_text())
    text = TextStore(v["entity_text"], v["relation_text"], v["max_len"])
    graph = KnowledgeGraph(v["entities"], v["relations"], arrays["graph"], text,
                           v["n_base_relations"], v["augmented"])
    split = TripleSplit(arrays["train"], arrays["valid"], arrays["test"],
                        unseen_entities=set(v["unseen_entities"]))
    return graph, split


def bundle_hash(directory: str | Path) -> str:
    h = hashlib.sha256()
    for name in ("bundle.npz", "vocab.json"):
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------
def _dataclass_from(cls, d: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


def load_config(args) -> dict:
    """Config file sections merged with command-line overrides (flags win)."""
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DatasetError("config file not found", str(path))
        raw = json.loads(path.read_text())
    unknown = set(raw) - {"train", "fusion", "preset", "structure", "text"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    train = dict(raw.get("train", {}))
    fusion = dict(raw.get("fusion", {}))
    struct = dict(raw.get("structure", {}))
    text = dict(raw.get("text", {}))
    preset_name = getattr(args, "preset", None) or raw.get("preset")
    for flag, key in (("epochs", "pretrain_epochs"), ("rounds", "fusion_epochs"),
                      ("batch_size", "batch_size"), ("lr", "lr_struct"), ("lr", "lr_text"),
                      ("seed", "seed"), ("eval_every", "eval_every")):
        val = getattr(args, flag, None)
        if val is not None:
            train[key] = val
    dim = getattr(args, "dim", None)
    if dim is not None:
        struct["dim"] = dim
        text["dim"] = dim
    for flag in ("alpha_t", "alpha_s", "beta_t", "beta_s", "N", "M"):
        val = getattr(args, flag, None)
        if val is not None:
            fusion[flag] = val
    tcfg = _dataclass_from(TrainConfig, train, "train")
    base = dict(L.PRESETS[preset_name.lower()]) if preset_name else {}
    if preset_name and preset_name.lower() not in L.PRESETS:
        raise ValueError(f"unknown preset {preset_name!r}")
    fcfg = _dataclass_from(L.FusionConfig, {**base, **fusion}, "fusion")
    struct.setdefault("seed", stream_seed(tcfg.seed, "init-structure"))
    text.setdefault("seed", stream_seed(tcfg.seed, "init-text"))
    return {"train": tcfg, "fusion": fcfg, "preset": preset_name,
            "structure": _dataclass_from(StructConfig, struct, "structure"),
            "text": _dataclass_from(TextConfig, text, "text")}


def run_dir(args) -> Path:
    d = Path(args.run_dir or os.environ.get("VEMFUSE_RUN_DIR") or "runs")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(directory: Path, command: str, cfg: dict, bundle: Path,
                   artifacts: dict[str, str]) -> Path:
    """Record everything needed to repeat the run; refuses to alter an existing one."""
    manifest = {"command": command, "tool_version": __version__,
                "config": {"train": cfg["train"].to_dict(), "fusion": cfg["fusion"].to_dict(),
                           "structure": asdict(cfg["structure"]), "text": asdict(cfg["text"]),
                           "preset": cfg["preset"]},
                "seeds": {"seed": cfg["train"].seed, "structure_init": cfg["structure"].seed,
                          "text_init": cfg["text"].seed},
                "dataset": {"bundle": str(bundle), "sha256": bundle_hash(bundle)},
                "artifacts": artifacts}
    path = directory / f"manifest_{command}.json"
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    if path.exists() and path.read_text() != text:
        raise ValueError(f"{path} belongs to a different run; choose another --run-dir")
    path.write_text(text)
    return path


def build_models(graph: KnowledgeGraph, cfg: dict, which: str = "both"):
    out = {}
    if which in ("structure", "both"):
        out["structure"] = StructureModel(graph, cfg["structure"])
    if which in ("text", "both"):
        out["text"] = TextModel(graph, cfg["text"])
    return out


def model_from_checkpoint(graph: KnowledgeGraph, prefix: str | Path, tag: str | None = None):
    """Rebuild a model with the architecture recorded in its checkpoint."""
    prefix = Path(prefix)
    manifest = prefix.with_suffix(".json")
    if not manifest.exists() or not prefix.with_suffix(".bin").exists():
        raise MissingCheckpoint(f"checkpoint {prefix} not found")
    meta = json.loads(manifest.read_text()).get("meta", {})
    tag = meta.get("tag", tag)
    if tag == "structure":
        model = StructureModel(graph, _dataclass_from(StructConfig, meta.get("config", {}), "structure"))
    elif tag == "text":
        model = TextModel(graph, _dataclass_from(TextConfig, meta.get("config", {}), "text"))
    else:
        raise ValueError(f"checkpoint {prefix} does not name a model")
    load_model_state(model, prefix)
    return model


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_prepare(args) -> int:
    args.seed = 0 if args.seed is None else args.seed
    out = Path(args.out) if args.out else run_dir(args) / "data"
    if args.fixture:
        raw_dir = out / "raw"
        if args.fixture == "split-signal":
            paths = write_split_signal(generate_split_signal(SyntheticSpec(seed=args.seed)), raw_dir)
        elif args.fixture == "random":
            paths = write_random_dataset(raw_dir, 1000, seed=args.seed)
        else:
            raise ValueError(f"unknown fixture {args.fixture!r}")
        train, valid, test = paths["train"], paths["valid"], paths["test"]
        ent, rel = paths.get("entity_text"), paths.get("relation_text")
    else:
        base = Path(args.data_dir) if args.data_dir else None
        train = Path(args.train) if args.train else base / "train.txt"
        valid = Path(args.valid) if args.valid else base / "valid.txt"
        test = Path(args.test) if args.test else base / "test.txt"
        ent = Path(args.entity_text) if args.entity_text else None
        rel = Path(args.relation_text) if args.relation_text else None
        if base is not None:
            ent = ent or (base / "entity2text.txt" if (base / "entity2text.txt").exists() else None)
            rel = rel or (base / "relation2text.txt" if (base / "relation2text.txt").exists() else None)
        for p in (train, valid, test):
            if not Path(p).exists():
                raise DatasetError("file not found", str(p))
    graph, split = load_dataset(train, valid, test, ent, rel, args.max_len)
    raw_train = len(split.train)
    if args.fraction is not None:
        split = sparsify(split, args.fraction, args.seed)
        graph = graph.with_triples(split.train)
    stats = {"raw_train": raw_train, "train": len(split.train), "valid": len(split.valid),
             "test": len(split.test), "entities": graph.n_entities,
             "relations": graph.n_relations, "fraction": args.fraction, "seed": args.seed,
             "duplicates_removed": split.duplicates_removed,
             "unseen_entities": len(split.unseen_entities),
             "empty_text": graph.text.empty_counts(), "degree": degree_stats(graph),
             "sources": {k: str(v) for k, v in (("train", train), ("valid", valid), ("test", test),
                                                 ("entity_text", ent), ("relation_text", rel))
                         if v is not None},
             "source_sha256": {k: file_hash(v) for k, v in (("train", train), ("valid", valid),
                                                              ("test", test)) }}
    sim, empty = relation_jaccard(graph)
    off = sim[~np.eye(len(sim), dtype=bool)]
    stats["relation_jaccard_offdiag_mean"] = float(off.mean()) if off.size else 0.0
    graph, split = augment_inverse(graph, split)
    save_bundle(out, graph, split, stats)
    print(json.dumps({"bundle": str(out), "train": stats["train"], "raw_train": raw_train}))
    return EXIT_OK


def _bundle_arg(args) -> Path:
    return Path(args.bundle) if args.bundle else run_dir(args) / "data"


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    out = run_dir(args)
    bundle = _bundle_arg(args)
    graph, split = load_bundle(bundle)
    models = build_models(graph, cfg, args.model)
    write_manifest(out, f"pretrain_{args.model}", cfg, bundle,
                   {tag: str(out / tag) for tag in models})
    runlog = RunLog()
    summary = {}
    for tag, model in models.items():
        t0 = time.perf_counter()
        try:
            pretrain(model, graph, split, cfg["train"], log_=runlog)
        finally:
            runlog.write_jsonl(out / "pretrain_log.jsonl")
        save_model(model, out / tag, {"stage": "pretrain"})
        summary[tag] = {"dev_mrr": max((r.get("dev_mrr", -1.0) for r in runlog.of("pretrain")
                                        if r["model"] == tag), default=None),
                        "wall": time.perf_counter() - t0}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = load_config(args)
    out = run_dir(args)
    bundle = _bundle_arg(args)
    graph, split = load_bundle(bundle)
    src = Path(args.init) if args.init else out
    models = {tag: model_from_checkpoint(graph, src / tag, tag) for tag in ("structure", "text")}
    cfg["structure"], cfg["text"] = models["structure"].config, models["text"].config
    write_manifest(out, "fuse", cfg, bundle,
                   {tag: str(out / f"{tag}_fused") for tag in models})
    runlog = RunLog()
    try:
        result = fuse(models["structure"], models["text"], graph, split, cfg["fusion"],
                      cfg["train"], runlog=runlog)
    finally:
        runlog.write_jsonl(out / "fuse_log.jsonl")
    for tag, model in models.items():
        save_model(model, out / f"{tag}_fused", {"stage": "fuse"})
    report = {"chosen": result.chosen, "dev_mrr": result.dev_mrr,
              "checkpoint": str(out / f"{result.chosen}_fused")}
    (out / "fuse_result.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    out = run_dir(args)
    graph, split = load_bundle(_bundle_arg(args))
    model = model_from_checkpoint(graph, args.checkpoint, args.model)
    tag = model.tag
    seed = stream_seed(cfg["train"].seed, "tie")
    metrics, results = evaluate(model, graph, split, args.split, args.tie_policy, seed,
                                top_k=args.dump_topk or 0)
    target = Path(args.out) if args.out else out / f"metrics_{tag}_{args.split}.json"
    write_metrics(target, metrics)
    if args.ranks:
        write_ranks(args.ranks, results)
    if args.dump_topk:
        trip = eval_triples(graph, split, args.split)
        if args.limit:
            trip = trip[:args.limit]
        dump = dump_topk(model, graph, split, trip, args.dump_topk)
        (target.with_name(target.stem + "_topk.json")).write_text(json.dumps(dump, indent=1) + "\n")
    print(metrics.to_json())
    return EXIT_OK


def cmd_densify_stats(args) -> int:
    cfg = load_config(args)
    out = run_dir(args)
    graph, split = load_bundle(_bundle_arg(args))
    src = Path(args.init) if args.init else out
    if args.untrained:
        models = build_models(graph, cfg)
    else:
        models = {tag: model_from_checkpoint(graph, src / tag, tag) for tag in ("structure", "text")}
    fcfg = cfg["fusion"]
    rng = stream(cfg["train"].seed, "densify", "stats")
    before = graph.content_hash()
    per_batch = []
    for _ in range(args.batches):
        b = densify(graph, models["structure"], models["text"], fcfg.N, fcfg.M, rng,
                    fcfg.tx_vem_t, fcfg.top_k, fcfg.relation_sampling)
        per_batch.append(b.stats.to_dict())
    report = {"batches": args.batches, "N": fcfg.N, "M": fcfg.M,
              "base_graph_unchanged": graph.content_hash() == before,
              "totals": {k: sum(s[k] for s in per_batch) for k in per_batch[0]
                         if k != "mean_confidence"} if per_batch else {},
              "mean_confidence": float(np.nanmean([s["mean_confidence"] for s in per_batch]))
              if per_batch else float("nan")}
    (out / "densify_stats.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def run_diagnostics(seed: int = 0) -> dict:
    """ELBO bookkeeping on the tiny fixture plus finite-difference checks."""
    graph, split, uq = tiny_graph()
    graph, split = augment_inverse(graph, split)
    t0 = time.perf_counter()
    st = StructureModel(graph, StructConfig(dim=6, seed=seed, dtype="float64"))
    tx = TextModel(graph, TextConfig(dim=6, seed=seed, dtype="float64"))
    observed = split.train
    elbo = L.elbo_diagnostic(st, observed, uq, text_model=tx)
    elbo_wall = time.perf_counter() - t0

    rng = np.random.default_rng(seed)
    heads = split.train[:4, 0]
    rels = split.train[:4, 1]
    labels = [[int(t)] for t in split.train[:4, 2]]
    teacher = dm.softmax_T(rng.normal(size=(4, graph.n_entities)))
    cfg = L.FusionConfig()
    checks = {
        "supervised_structure": (lambda: L.supervised_loss(st.logits(heads, rels), labels), st),
        "supervised_text": (lambda: L.supervised_loss(tx.logits(heads, rels), labels), tx),
        "ml_text": (lambda: L.ml_loss_text(teacher, tx.logits(heads, rels), cfg), tx),
        "ml_struct": (lambda: L.ml_loss_struct(teacher, st.logits(heads, rels), cfg), st),
        "vem_e": (lambda: L.vem_e_loss(tx.logits(heads, rels), teacher, cfg), tx),
        "vem_m": (lambda: L.vem_m_loss(teacher, st.logits(heads, rels), cfg), st),
    }
    grads = {}
    for name, (fn, model) in checks.items():
        grads[name] = dm.finite_diff_check(fn, model.parameters(), seed=seed)
    return {"elbo": elbo.to_dict(), "elbo_wall": elbo_wall, "finite_diff_max_rel_err": grads}


def cmd_diag(args) -> int:
    report = run_diagnostics(args.seed or 0)
    out = run_dir(args)
    (out / "diag.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    ok = bool(report["elbo"]["residual"] < 1e-8
          and max(abs(v) for v in report["elbo"]["per_triple_identity"]) < 1e-10
          and max(report["finite_diff_max_rel_err"].values()) < 1e-4)
    print(json.dumps({"residual": report["elbo"]["residual"],
                      "per_triple_identity": report["elbo"]["per_triple_identity"],
                      "finite_diff_max_rel_err": report["finite_diff_max_rel_err"],
                      "ok": ok}, sort_keys=True))
    return EXIT_OK if ok else EXIT_ERROR


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run-dir", help="output directory (default $VEMFUSE_RUN_DIR or ./runs)")
    p.add_argument("--seed", type=int, help="root seed for every random stream")
    p.add_argument("--workers", type=int, default=1,
                   help="upper bound on parallel workers (computation is single-threaded)")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bundle", help="prepared bundle directory (default <run-dir>/data)")
    p.add_argument("--config", help="JSON config with train/fusion/structure/text sections")
    p.add_argument("--preset", help="fusion preset: " + ", ".join(sorted(L.PRESETS)))
    p.add_argument("--epochs", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--eval-every", type=int)
    for w in ("alpha_t", "alpha_s", "beta_t", "beta_s"):
        p.add_argument(f"--{w.replace('_', '-')}", dest=w, type=float)
    p.add_argument("--N", dest="N", type=int, help="generated queries per batch")
    p.add_argument("--M", dest="M", type=int, help="neighbour queries per generated query")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vemfuse", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load, validate, sparsify and augment a dataset")
    _common(p)
    p.add_argument("--data-dir", help="directory with train.txt/valid.txt/test.txt")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--entity-text")
    p.add_argument("--relation-text")
    p.add_argument("--fixture", choices=("split-signal", "random"),
                   help="generate a synthetic dataset instead of reading files")
    p.add_argument("--fraction", type=float, help="keep this fraction of training triples")
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--out", help="bundle directory (default <run-dir>/data)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="pre-train the structure and/or text model")
    _common(p)
    _training(p)
    p.add_argument("--model", choices=("structure", "text", "both"), default="both")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fuse", help="joint E/M training from pre-trained checkpoints")
    _common(p)
    _training(p)
    p.add_argument("--init", help="directory holding structure/text checkpoints (default run dir)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="filtered ranking metrics for one checkpoint")
    _common(p)
    _training(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint prefix (without .bin/.json)")
    p.add_argument("--model", choices=("structure", "text"), default="structure")
    p.add_argument("--split", choices=("dev", "test"), default="test")
    p.add_argument("--tie-policy", choices=("random", "expected", "optimistic"), default="random")
    p.add_argument("--dump-topk", type=int, default=0)
    p.add_argument("--limit", type=int, help="queries to include in the top-k dump")
    p.add_argument("--ranks", help="also write per-query ranks (JSON lines) here")
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("densify-stats", help="statistics of generated queries and overlays")
    _common(p)
    _training(p)
    p.add_argument("--init", help="directory holding structure/text checkpoints (default run dir)")
    p.add_argument("--batches", type=int, default=10)
    p.add_argument("--untrained", action="store_true", help="use freshly initialised models")
    p.set_defaults(func=cmd_densify_stats)

    p = sub.add_parser("diag", help="ELBO identity and gradient checks on a tiny fixture")
    _common(p)
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CHECKPOINT
    except (NonFiniteLoss, dm.NonFiniteError) as exc:
        dump = run_dir(args) / "nonfinite_dump.json"
        dump.write_text(json.dumps({"where": getattr(exc, "where", "forward"),
                                    "components": getattr(exc, "components", {}),
                                    "message": str(exc)}, indent=2, sort_keys=True) + "\n")
        print(f"error: {exc} (details in {dump})", file=sys.stderr)
        return EXIT_NONFINITE
    except (DatasetError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
