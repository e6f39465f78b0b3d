"""Command-line pipeline: gen, train, index, check and eval.

Exit codes: 0 clean, 2 when ``check`` finds a likely spoof, 1 on any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluate as ev
from . import index as kd
from .baselines import score_pairs
from .corpus import (
    ConfusableTable,
    DatasetConfig,
    build_dataset,
    generate_spoof,
    load_names,
    read_pairs,
    write_pairs,
)
from .net import NonFiniteUpdate, TrainConfig, embed, load_model, save_model, train
from .render import MAX_GLYPHS, GlyphAtlas, RenderError, default_font_path, file_sha256, render_string, truncate_to_fit

log = logging.getLogger("homoglyph")

DEFAULT_SEED = 1234
EXIT_OK, EXIT_ERROR, EXIT_DETECTED = 0, 1, 2
SPLITS = ("train", "validation", "test")
FIG_BASES = ("google.com", "facebook.com", "twitter.com", "snapchat.com")


class CliError(Exception):
    pass


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {p}")
    return p


def _need_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"no such directory: {p}")
    return p


def _atlas(args) -> GlyphAtlas:
    return GlyphAtlas(_need_file(args.font)) if args.font else GlyphAtlas()


def _read_lines(path) -> list[str]:
    text = _need_file(path).read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _load_split(dataset: Path):
    return {k: read_pairs(_need_file(dataset / f"{k}.tsv")) for k in SPLITS}


def _model_manifest(model_path: Path) -> dict:
    p = model_path.with_suffix(".json")
    return json.loads(p.read_text(encoding="utf-8")) if p.is_file() else {}


def _fit_query(s: str, atlas: GlyphAtlas) -> str:
    t = truncate_to_fit(s, atlas)
    if t != s.rstrip():
        log.warning("truncated %r to %r (limit %d glyphs / frame width)", s, t, MAX_GLYPHS)
    return t


# --- subcommands ------------------------------------------------------------


def cmd_gen(args) -> int:
    names_path = _need_file(args.names)
    out = Path(args.out)
    atlas = _atlas(args)
    table = ConfusableTable.load()
    cfg = DatasetConfig(n_benign=args.benign, n_spoof=args.spoof, seed=args.seed, max_edits=args.max_edits)
    ds = build_dataset(load_names(names_path), args.mode, cfg, table, atlas)
    out.mkdir(parents=True, exist_ok=True)
    parts = ds.parts()
    for k in SPLITS:
        write_pairs(parts[k], out / f"{k}.tsv")
    _write_json(
        out / "manifest.json",
        {
            "seed": args.seed,
            "mode": args.mode,
            "max_edits": cfg.edits_for(args.mode),
            "requested": {"benign": args.benign, "spoof": args.spoof},
            "counts": {k: len(parts[k]) for k in SPLITS},
            "names_file": names_path.name,
            "names_sha256": file_sha256(names_path),
            "confusables_sha256": table.checksum(),
            "font_sha256": atlas.font_sha256,
        },
    )
    print(f"wrote {sum(len(p) for p in parts.values())} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = _need_dir(args.dataset)
    atlas = _atlas(args)
    parts = _load_split(dataset)
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        early_stop_patience=args.patience,
        margin=args.margin,
        rng_seed=args.seed,
    )
    start = time.perf_counter()
    w, hist = train(parts["train"], parts["validation"], atlas, cfg)
    secs = time.perf_counter() - start
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.bin"
    save_model(w, model_path)
    (out / "history.csv").write_text(hist.to_csv(seconds=False), encoding="utf-8")
    # wall-clock is the one output that cannot repeat byte for byte, so it lives apart
    (out / "timing.csv").write_text(
        "epoch,seconds\n" + "".join(f"{i},{t:.3f}\n" for i, t in enumerate(hist.seconds, 1)), encoding="utf-8"
    )

    val = parts["validation"]
    scores = [s for s, _ in score_pairs(val, "model", weights=w, atlas=atlas)]
    roc = ev.roc_auc(scores, [p.label for p in val], "model")
    threshold = roc.threshold_at_fpr(0.01)
    ds_manifest = dataset / "manifest.json"
    _write_json(
        out / "model.json",
        {
            "seed": args.seed,
            "config": {
                "learning_rate": cfg.learning_rate,
                "batch_size": cfg.batch_size,
                "epochs": cfg.epochs,
                "early_stop_patience": cfg.early_stop_patience,
                "margin": cfg.margin,
                "rmsprop_decay": cfg.rmsprop_decay,
                "leaky_slope": cfg.leaky_slope,
            },
            "epochs_run": len(hist),
            "best_epoch": hist.best_epoch + 1,
            "dataset_sha256": {k: file_sha256(dataset / f"{k}.tsv") for k in SPLITS},
            "dataset_manifest_sha256": file_sha256(ds_manifest) if ds_manifest.is_file() else None,
            "font_sha256": atlas.font_sha256,
            "parameters_sha256": w.digest(),
            "model_sha256": file_sha256(model_path),
            "validation_auc": roc.auc,
            "default_threshold": threshold,
            "threshold_rule": "max TPR at validation FPR <= 0.01",
        },
    )
    log.info("training took %.1f s", secs)
    print(f"model {model_path} val auc {roc.auc:.4f} threshold {threshold:.6g}")
    return EXIT_OK


def cmd_index(args) -> int:
    names = _read_lines(args.names)
    if not names:
        raise CliError(f"{args.names} holds no names")
    model_path = _need_file(args.model)
    atlas = _atlas(args)
    w = load_model(model_path)
    names = list(dict.fromkeys(_fit_query(s, atlas) for s in names))
    start = time.perf_counter()
    feats = embed(w, names, atlas)
    forest = kd.build(feats, names, args.trees, args.seed)
    forest.model_digest = w.digest()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = kd.save_index(forest, out / "index.bin")
    secs = time.perf_counter() - start
    _write_json(
        out / "index.json",
        {
            "seed": args.seed,
            "trees": args.trees,
            "size": forest.size,
            "names_sha256": file_sha256(args.names),
            "model_parameters_sha256": w.digest(),
            "font_sha256": atlas.font_sha256,
            "index_sha256": digest,
        },
    )
    log.info("embedded and indexed %d names in %.1f s", forest.size, secs)
    print(f"indexed {forest.size} names to {out / 'index.bin'}")
    return EXIT_OK


def cmd_check(args) -> int:
    queries = _read_lines(args.queries)
    model_path = _need_file(args.model)
    forest = kd.load_index(_need_file(args.index))
    w = load_model(model_path)
    if forest.model_digest and forest.model_digest != w.digest():
        raise CliError("index was built with a different model (parameter checksum mismatch)")
    threshold = args.threshold
    if threshold is None:
        threshold = _model_manifest(model_path).get("default_threshold")
        if threshold is None:
            raise CliError("no --threshold given and the model manifest has no default")
    atlas = _atlas(args)
    report = []
    detected = False
    fitted = [_fit_query(s, atlas) for s in queries]
    for s in fitted:
        if s:
            missing = render_string(s, atlas).missing
            if missing:
                log.warning("%r uses glyphs missing from the font: %s", s, "".join(sorted(set(missing))))
    good = [s for s in fitted if s]
    feats = embed(w, good, atlas) if good else np.zeros((0, 32))
    for s, f in zip(good, feats):
        res = kd.query_radius(forest, f, threshold, args.checks)
        matches = [{"name": name, "distance": d} for _, name, d in res.items]
        detected |= bool(matches)
        report.append({"query": s, "matches": matches})
    text = json.dumps({"threshold": threshold, "checks": args.checks, "results": report}, indent=2, ensure_ascii=False)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_DETECTED if detected else EXIT_OK


def _cluster_names(base_names, table, atlas, seed, per_base=4):
    import random

    rng = random.Random(seed)
    groups = {}
    for b in base_names:
        fakes = []
        for _ in range(50 * per_base):
            f = generate_spoof(b, table, rng, 3, atlas)
            if f not in fakes:
                fakes.append(f)
            if len(fakes) == per_base:
                break
        groups[b] = [b] + fakes
    return groups


def cmd_eval(args) -> int:
    dataset = _need_dir(args.dataset)
    atlas = _atlas(args)
    w = load_model(_need_file(args.model)) if args.model else None
    scorers = [s.strip() for s in args.scorers.split(",") if s.strip()]
    if "model" in scorers and w is None:
        raise CliError("the model scorer needs --model")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = _load_split(dataset)["test"]
    labels = [p.label for p in test]
    results = {}
    for sc in scorers:
        scores = [s for s, _ in score_pairs(test, sc, weights=w, atlas=atlas)]
        results[sc] = ev.roc_auc(scores, labels, sc)
        ev.write_text(out / f"roc_{sc}.csv", results[sc].to_csv())
    summary = ev.auc_summary(results)
    summary["test_pairs"] = len(test)
    if "visual" in results:
        summary["notes"] = {
            "visual": "substitution cost is 1 - glyph pixel Jaccard on the bundled font; "
            "an approximation of published visual cost tables, not a copy of them"
        }

    if args.names:
        hist = ev.percent_edit_distance_histogram(_read_lines(args.names))
        ev.write_text(out / "histogram.csv", ev.histogram_csv(hist))

    if w is not None:
        groups = _cluster_names(FIG_BASES, ConfusableTable.load(), atlas, args.seed)
        flat = [s for g in groups.values() for s in g]
        tags = [b for b, g in groups.items() for _ in g]
        feats = embed(w, flat, atlas)
        coords, _, _ = ev.pca_project(feats, 2)
        ev.write_text(out / "pca.csv", ev.pca_csv(flat, tags, coords))
        by = {b: feats[[i for i, t in enumerate(tags) if t == b]] for b in groups}
        intra, inter = ev.cluster_separation(by)
        summary["cluster"] = {"intra": intra, "inter": inter, "ratio": intra / inter}

    if args.ann_size:
        pts, qs = ev.synthetic_embeddings(args.ann_size, args.ann_queries, seed=args.seed)
        forest = kd.build(pts, None, args.trees, args.seed)
        oracle = ev.oracle_top1(forest, qs)
        checks = [int(c) for c in args.checks_list.split(",")]
        curve = ev.recall_vs_checks(forest, qs, oracle, checks)
        ev.write_text(out / "recall_checks.csv", curve.to_csv())
        summary["linear_scan_us"] = ev.time_linear_scan(forest, qs)

    ev.write_json(out / "summary.json", summary)
    for sc, r in results.items():
        print(f"{sc:7s} auc {r.auc:.4f}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------


def _version_text() -> str:
    lines = [f"homoglyph {__version__}", f"font {default_font_path().name} sha256 {file_sha256(default_font_path())}"]
    lines.append(f"confusables sha256 {ConfusableTable.load().checksum()}")
    from importlib import resources

    for kind in ("process", "domain"):
        p = Path(str(resources.files("homoglyph") / "data" / f"{kind}_names.txt"))
        lines.append(f"{p.name} sha256 {file_sha256(p)}")
    return "\n".join(lines)


class _Version(argparse.Action):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, default=argparse.SUPPRESS, **kw)

    def __call__(self, parser, namespace, values, option_string=None):
        print(_version_text())
        parser.exit()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--font", help="TrueType font to render with (default: bundled DejaVu Sans)")
    common.add_argument("--out", required=True, help="output directory (file for check)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="homoglyph", description="Visual homoglyph detection for names.")
    p.add_argument("--version", action=_Version, help="print version and data checksums")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="synthesize a labelled pair dataset")
    g.add_argument("names", help="newline-delimited names")
    g.add_argument("--mode", choices=("process", "domain"), default="process")
    g.add_argument("--benign", type=int, default=10_000)
    g.add_argument("--spoof", type=int, default=10_000)
    g.add_argument("--max-edits", type=int, help="confusable substitutions per spoof (default per mode)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train the embedding network")
    t.add_argument("dataset", help="directory written by gen")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--epochs", type=int, default=15)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--margin", type=float, default=1.0)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("index", parents=[common], help="embed names and build the KD forest")
    i.add_argument("names")
    i.add_argument("--model", required=True)
    i.add_argument("--trees", type=int, default=kd.DEFAULT_TREES)
    i.set_defaults(func=cmd_index)

    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--seed", type=int, default=DEFAULT_SEED)
    c.add_argument("--font")
    c.add_argument("--out", help="write the JSON report here instead of stdout")
    c.add_argument("-v", "--verbose", action="store_true")
    k = sub.add_parser("check", parents=[c], help="screen names against an index")
    k.add_argument("queries", help="newline-delimited names to screen")
    k.add_argument("--index", required=True)
    k.add_argument("--model", required=True)
    k.add_argument("--threshold", type=float, help="distance cut-off (default: model manifest)")
    k.add_argument("--checks", type=int, default=kd.DEFAULT_CHECKS)
    k.set_defaults(func=cmd_check)

    e = sub.add_parser("eval", parents=[common], help="ROC, histogram, PCA and recall measurements")
    e.add_argument("dataset", help="directory written by gen")
    e.add_argument("--model")
    e.add_argument("--scorers", default="edit,visual,model")
    e.add_argument("--names", help="name list for the percent-edit-distance histogram")
    e.add_argument("--trees", type=int, default=kd.DEFAULT_TREES)
    e.add_argument("--ann-size", type=int, default=0, help="synthetic index size for recall vs checks (0 skips)")
    e.add_argument("--ann-queries", type=int, default=1000)
    e.add_argument("--checks-list", default=",".join(str(2**i) for i in range(11)))
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except NonFiniteUpdate as e:
        print(f"error: NonFiniteUpdate: {e}", file=sys.stderr)
    except (CliError, OSError, ValueError, RenderError, kd.IndexFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
