"""Command-line pipeline: gen-data, train-unimodal, optimize, fuse, evaluate, explain, report.

Every stage reads and writes under one output root (``--out``, default
``$MMFUSE_OUT`` or ``./mmfuse_out``). Files are written atomically and
contain no timestamps, so reruns with the same seed are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from . import fusion as fu
from . import harness as h
from . import nn
from .selection import ApplicationMatrix, SelectionError, optimize
from .unimodal import Preprocessor, read_predictions, read_tabular, write_predictions, write_tabular
from .xai import XaiError, explain_instance

log = logging.getLogger("mmfuse")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3, 4
ENV_OUT = "MMFUSE_OUT"


class MissingInput(Exception):
    pass


# ---------------------------------------------------------------- file helpers


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def read_text(path: Path, what: str) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MissingInput(f"missing {what}: {path}") from None


def _cell_file(mod: str, arch: str) -> str:
    return f"{mod}__{arch}"


# ---------------------------------------------------------------- config


def resolve_config(args) -> h.ExperimentConfig:
    """``--config`` file, else the run's saved config, else defaults; then ``--set`` and ``--seed``."""
    root = Path(args.out)
    if args.config:
        try:
            base = json.loads(read_text(Path(args.config), "config file"))
        except json.JSONDecodeError as exc:
            raise h.ConfigError(f"config file is not valid JSON: {exc}") from None
    elif (root / "config.json").exists() and args.command != "gen-data":
        base = json.loads((root / "config.json").read_text(encoding="utf-8"))
    else:
        base = h.ExperimentConfig().to_dict()
    if not isinstance(base, dict):
        raise h.ConfigError("config must be a JSON object")
    sets = list(args.set or [])
    if args.seed is not None:
        sets += [f"seed={args.seed}", f"generator.seed={args.seed}"]
    if args.jobs is not None:
        sets.append(f"jobs={args.jobs}")
    return h.ExperimentConfig.from_dict(h.apply_overrides(base, sets))


# ---------------------------------------------------------------- loading stage outputs


def load_data(root: Path, cfg: h.ExperimentConfig) -> tuple[h.MultimodalDataset, h.MultimodalDataset | None]:
    def load(part: str) -> h.MultimodalDataset | None:
        mods = {}
        for m in cfg.generator.modality_names:
            p = root / "data" / part / f"{m}.csv"
            if not p.exists():
                if part == "ext":
                    return None
                raise MissingInput(f"missing modality table: {p} (run gen-data first)")
            mods[m] = read_tabular(p.read_text(encoding="utf-8"))
        first = next(iter(mods.values()))
        for m, ds in mods.items():
            if ds.ids != first.ids:
                raise h.ConfigError(f"modality {m!r} rows are not aligned with the others")
        return h.MultimodalDataset(mods, first.labels, first.center_ids, list(first.ids))

    return load("dev"), load("ext")


def data_for(kind: str, dev: h.MultimodalDataset, ext: h.MultimodalDataset | None) -> h.MultimodalDataset:
    if kind == "ev":
        if ext is None:
            raise MissingInput("the ev split needs the external tables in data/ext")
        return dev.concat(ext)
    return dev


def load_plan(root: Path, kind: str, data: h.MultimodalDataset) -> h.SplitPlan:
    d = json.loads(read_text(root / "splits" / f"{kind}.json", f"{kind} split plan"))
    return h.SplitPlan.from_dict(d, data.ids)


def load_fold_state(root: Path, kind: str, fold: h.Fold, data: h.MultimodalDataset,
                    cfg: h.ExperimentConfig) -> h.FoldState:
    base = root / "unimodal" / kind / fold.name
    theta = cfg.application_matrix()
    pre_d = json.loads(read_text(base / "preprocess.json", "preprocessing statistics"))
    pres = {m: Preprocessor.from_dict(pre_d[m]) for m in theta.modalities}
    inputs = {m: pres[m].transform(data.modalities[m]).features for m in theta.modalities}
    nets, preds = {}, {}
    for cell in theta.active():
        mod, arch = theta.name(cell)
        nets[(mod, arch)] = nn.loads_network(read_text(base / f"{_cell_file(mod, arch)}.net", "unimodal network"))
    for pm in read_predictions(read_text(base / "val_predictions.csv", "validation predictions")):
        preds[(theta.modalities.index(pm.modality_id), theta.models.index(pm.model_id))] = pm
    return h.FoldState(kind, fold, pres, nets, preds, data.labels[fold.val], inputs)


def gamma_for(root: Path, kind: str, cfg: h.ExperimentConfig) -> list[tuple[str, str]]:
    src = "cv" if cfg.splits.reuse_cv_selection and (root / "selection" / "cv.json").exists() else kind
    sel = json.loads(read_text(root / "selection" / f"{src}.json", "selection result (run optimize)"))
    return [tuple(m) for m in sel["gamma_star"]["members"]]


def _kinds(args, cfg: h.ExperimentConfig) -> list[str]:
    kinds = [args.split] if getattr(args, "split", None) else list(cfg.splits.kinds)
    unknown = set(kinds) - {"cv", "loco", "ev"}
    if unknown:
        raise h.ConfigError(f"unknown split kinds {sorted(unknown)}")
    return [k for k in ("cv", "loco", "ev") if k in kinds]


# ---------------------------------------------------------------- stages


def cmd_gen_data(args, cfg: h.ExperimentConfig) -> None:
    root = Path(args.out)
    dev, ext = h.make_data(cfg)
    for part, ds in (("dev", dev), ("ext", ext)):
        if ds is None:
            continue
        for m, tab in ds.modalities.items():
            write_atomic(root / "data" / part / f"{m}.csv", write_tabular(tab))
    for kind, plan in h.build_plans(cfg, dev, ext).items():
        ids = data_for(kind, dev, ext).ids
        write_atomic(root / "splits" / f"{kind}.json", dump_json(plan.to_dict(ids)))
    write_atomic(root / "config.json", dump_json(cfg.to_dict()))
    print(f"wrote {len(dev)} development rows" + (f" and {len(ext)} external rows" if ext else "")
          + f" to {root / 'data'}")


def _save_fold_state(root: Path, st: h.FoldState) -> None:
    base = root / "unimodal" / st.kind / st.fold.name
    write_atomic(base / "preprocess.json", dump_json({m: p.to_dict() for m, p in sorted(st.preprocessors.items())}))
    for (mod, arch), net in sorted(st.nets.items()):
        write_atomic(base / f"{_cell_file(mod, arch)}.net", nn.dumps_network(net))
    write_atomic(base / "val_predictions.csv", write_predictions([st.val_predictions[c] for c in sorted(st.val_predictions)]))
    write_atomic(base / "train_logs.json", dump_json({f"{m}/{a}": lg.to_dict() for (m, a), lg in sorted(st.logs.items())}))


def cmd_train_unimodal(args, cfg: h.ExperimentConfig) -> None:
    root = Path(args.out)
    dev, ext = load_data(root, cfg)
    par = Parallel(n_jobs=cfg.jobs)
    for kind in _kinds(args, cfg):
        data = data_for(kind, dev, ext)
        plan = load_plan(root, kind, data)
        states = par(delayed(h.fit_fold_unimodal)(data, kind, f, cfg) for f in plan.folds)
        for st in states:
            _save_fold_state(root, st)
        print(f"{kind}: trained {len(states[0].nets)} models on {len(states)} folds")


def _external_selection(args, cfg: h.ExperimentConfig):
    pms = []
    for p in args.predictions:
        pms += read_predictions(read_text(Path(p), "prediction file"))
    if not pms:
        raise h.ConfigError("prediction files are empty")
    if not args.labels:
        raise MissingInput("--labels is required with --predictions")
    lab_rows = read_text(Path(args.labels), "labels file").strip().splitlines()
    header = lab_rows[0].split(",")
    if "id" not in header or "label" not in header:
        raise h.ConfigError("labels file needs id and label columns")
    i_id, i_lab = header.index("id"), header.index("label")
    label_of = {}
    for line in lab_rows[1:]:
        parts = line.split(",")
        label_of[parts[i_id]] = int(parts[i_lab])
    mods = sorted({pm.modality_id for pm in pms})
    models = sorted({pm.model_id for pm in pms})
    present = {pm.key for pm in pms}
    theta = ApplicationMatrix(tuple(mods), tuple(models),
                              tuple(tuple(int((m, a) in present) for a in models) for m in mods))
    per_fold: dict[str, dict] = {}
    labels: dict[str, np.ndarray] = {}
    for pm in pms:
        cell = (mods.index(pm.modality_id), models.index(pm.model_id))
        per_fold.setdefault(pm.fold_id, {})[cell] = pm
        try:
            labels.setdefault(pm.fold_id, np.array([label_of[i] for i in pm.instance_ids]))
        except KeyError as exc:
            raise h.ConfigError(f"no label for instance {exc.args[0]!r}") from None
    for fold, cells in per_fold.items():
        if len(cells) != theta.s:
            raise h.ConfigError(f"fold {fold!r} lacks predictions for some models")
    return optimize(theta, per_fold, labels, cfg.fusion.max_candidate_size)


def cmd_optimize(args, cfg: h.ExperimentConfig) -> None:
    root = Path(args.out)
    if args.predictions:
        results = {args.name: _external_selection(args, cfg)}
    else:
        dev, ext = load_data(root, cfg)
        results = {}
        kinds = _kinds(args, cfg)
        if cfg.splits.reuse_cv_selection and not args.split and "cv" in kinds:
            kinds = ["cv"]
        for kind in kinds:
            data = data_for(kind, dev, ext)
            plan = load_plan(root, kind, data)
            states = [load_fold_state(root, kind, f, data, cfg) for f in plan.folds]
            results[kind] = h.select_from_states(cfg, states)
    for name, res in results.items():
        write_atomic(root / "selection" / f"{name}.json", dump_json(res.to_dict()))
        rows = res.to_rows()
        write_atomic(root / "selection" / f"{name}.csv", "\n".join(",".join(map(str, r)) for r in rows) + "\n")
        print(f"{name}: Gamma* = {' + '.join(f'{m}/{a}' for m, a in res.member_names())}")


def _fuse_fold(root: Path, kind: str, fold: h.Fold, data, cfg, gamma):
    st = load_fold_state(root, kind, fold, data, cfg)
    rows, _, models = h.run_fold_fusion(data, st, gamma, cfg)
    return rows, {k: fu.dumps_fusion(m) for k, m in models.items()}


def cmd_fuse(args, cfg: h.ExperimentConfig) -> None:
    root = Path(args.out)
    variant = fu.parse_variant(args.mode).name
    cfg.fusion.variants = [variant]
    cfg.fusion.ablations = [variant] if args.ablate else []
    dev, ext = load_data(root, cfg)
    rows: list[h.MetricRow] = []
    par = Parallel(n_jobs=cfg.jobs)
    for kind in _kinds(args, cfg):
        data = data_for(kind, dev, ext)
        plan = load_plan(root, kind, data)
        gamma = gamma_for(root, kind, cfg)
        out = par(delayed(_fuse_fold)(root, kind, f, data, cfg, gamma) for f in plan.folds)
        for f, (r, texts) in zip(plan.folds, out):
            rows += r
            for label, text in texts.items():
                write_atomic(root / "fusion" / label / kind / f"{f.name}.fusion", text)
    write_atomic(root / "metrics" / f"{variant}.csv", h.rows_to_csv(rows))
    summary = h.summarize([r for r in rows if not r.variant.startswith("uni:")])
    for split, d in summary.items():
        for v, e in d.items():
            print(f"{split} {v}: acc {e['acc_mean']:.4f} +/- {e['acc_std']:.4f}")


def cmd_evaluate(args, cfg: h.ExperimentConfig) -> None:
    """Reload saved fused models and recompute test metrics from scratch."""
    root = Path(args.out)
    variant = fu.parse_variant(args.mode).name
    dev, ext = load_data(root, cfg)
    rows = []
    for kind in _kinds(args, cfg):
        data = data_for(kind, dev, ext)
        plan = load_plan(root, kind, data)
        for f in plan.folds:
            st = load_fold_state(root, kind, f, data, cfg)
            model = fu.loads_fusion(read_text(root / "fusion" / variant / kind / f"{f.name}.fusion",
                                              "fused model (run fuse)"))
            test = fu.FusionData(st.inputs, data.labels).subset(f.test)
            rows.append(h.MetricRow(variant, kind, f.name, *fu.evaluate_fusion(model, test).as_tuple()))
    write_atomic(root / "evaluation" / f"{variant}.csv", h.rows_to_csv(rows))
    for split, d in h.summarize(rows).items():
        e = d[variant]
        print(f"{split} {variant}: acc {e['acc_mean']:.4f} tpr {e['tpr_mean']:.4f} tnr {e['tnr_mean']:.4f}")


def cmd_explain(args, cfg: h.ExperimentConfig) -> None:
    root = Path(args.out)
    variant = fu.parse_variant(args.mode).name
    kind = args.split or "cv"
    dev, ext = load_data(root, cfg)
    data = data_for(kind, dev, ext)
    plan = load_plan(root, kind, data)
    if args.instance not in data.ids:
        raise h.ConfigError(f"unknown instance id {args.instance!r}")
    row = data.ids.index(args.instance)
    fold = next((f for f in plan.folds if row in set(f.test.tolist())), None)
    if fold is None:
        raise h.ConfigError(f"instance {args.instance!r} is in no test fold of the {kind} plan")
    st = load_fold_state(root, kind, fold, data, cfg)
    model = fu.loads_fusion(read_text(root / "fusion" / variant / kind / f"{fold.name}.fusion",
                                      "fused model (run fuse)"))
    x = {m: X[row] for m, X in st.inputs.items()}
    out = explain_instance(model, x, args.target, args.steps)
    out.update({"instance": args.instance, "fold": fold.name, "split": kind, "variant": variant,
                "target_class": args.target, "ig_steps": args.steps})
    path = root / "explain" / f"{variant}_{kind}_{args.instance}.json"
    write_atomic(path, dump_json(out))
    print(f"wrote {path}")


def cmd_report(args, cfg: h.ExperimentConfig) -> None:
    root = Path(args.out)
    files = sorted((root / "metrics").glob("*.csv"))
    if not files:
        raise MissingInput(f"no metrics files in {root / 'metrics'} (run fuse first)")
    seen: dict[tuple[str, str, str], h.MetricRow] = {}
    for p in files:
        for r in h.csv_to_rows(p.read_text(encoding="utf-8")):
            seen.setdefault((r.split, r.variant, r.fold), r)
    rows = [seen[k] for k in sorted(seen)]
    report = {"summary": h.summarize(rows), "seed": cfg.seed}
    sel_dir = root / "selection"
    if sel_dir.exists():
        report["gamma_star"] = {p.stem: json.loads(p.read_text(encoding="utf-8"))["gamma_star"]
                                for p in sorted(sel_dir.glob("*.json"))}
    write_atomic(root / "report" / "metrics.csv", h.rows_to_csv(rows))
    write_atomic(root / "report" / "report.json", dump_json(report))
    print(f"wrote {root / 'report'}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train-unimodal": cmd_train_unimodal, "optimize": cmd_optimize,
    "fuse": cmd_fuse, "evaluate": cmd_evaluate, "explain": cmd_explain, "report": cmd_report,
}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=os.environ.get(ENV_OUT, "mmfuse_out"),
                        help=f"output root for all artifacts (default: ${ENV_OUT} or ./mmfuse_out)")
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw of the run")
    common.add_argument("--config", default=None, help="JSON experiment config (overrides the saved one)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. training.max_epochs=50 (repeatable)")
    common.add_argument("--jobs", type=int, default=None, help="parallel workers for per-fold work")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="mmfuse", description="Multimodal model selection and joint-late fusion.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("gen-data", parents=[common], help="generate synthetic tables and split plans")
    t = sub.add_parser("train-unimodal", parents=[common], help="train every model of the application matrix per fold")
    t.add_argument("--split", choices=["cv", "loco", "ev"], help="only this split kind")
    o = sub.add_parser("optimize", parents=[common], help="select the fusion set from validation predictions")
    o.add_argument("--split", choices=["cv", "loco", "ev"], help="only this split kind")
    o.add_argument("--predictions", nargs="+", metavar="CSV", help="external prediction files instead of the run's")
    o.add_argument("--labels", metavar="CSV", help="id,label file for external predictions")
    o.add_argument("--name", default="external", help="result name for external predictions")
    for name, text in (("fuse", "train a fusion variant and write its metrics"),
                       ("evaluate", "reload fused models and recompute test metrics"),
                       ("explain", "attribute one instance through a fused model")):
        q = sub.add_parser(name, parents=[common], help=text)
        q.add_argument("--mode", required=True, choices=fu.VARIANTS, help="fusion variant")
        q.add_argument("--split", choices=["cv", "loco", "ev"], help="only this split kind")
        if name == "fuse":
            q.add_argument("--ablate", action="store_true", help="also retrain without each modality")
        if name == "explain":
            q.add_argument("--instance", required=True, help="instance id")
            q.add_argument("--target", type=int, default=fu.POSITIVE_CLASS, help="class whose logit is explained")
            q.add_argument("--steps", type=int, default=64, help="Integrated Gradients steps")
    sub.add_parser("report", parents=[common], help="aggregate metrics files into one report")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except MissingInput as exc:
        print(f"mmfuse: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except h.ConfigError as exc:
        print(f"mmfuse: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, SelectionError, fu.FusionError, XaiError, nn.TrainingError) as exc:
        print(f"mmfuse: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
