"""Command-line interface: ``cinedx <subcommand> ...``.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import DIAGNOSES, __version__
from .diagnosis import (
    FEATURE_NAMES, FeatureExtractionError, ForestFormatError, cross_validate,
    feature_importance, load_forest, read_features_csv, rf_posteriors, rf_train, save_forest,
    study_features, write_features_csv, DiagnosisReport, entropy_nats,
)
from .inference import segment_study
from .metrics import (
    STRUCTURES, UndefinedMetricError, bland_altman, dice_coef, hausdorff_mm, mean_sd, pearson, quantify,
)
from .phantom import generate_cohort
from .segnet import SegNetConfig, SnapshotFormatError, load_snapshot, save_snapshot
from .trainer import DESK_NET, DESK_TRAIN, TrainConfig, train
from .volume_io import (
    LabelMap, StudyFormatError, list_study_dirs, load_labels, load_study, preprocess_study,
    resample_labels, save_labels, save_study,
)

log = logging.getLogger("cinedx")

THREADS_ENV = "CINEDX_THREADS"
RUN_CONFIG = "run_config.json"
SNAPSHOT_SUFFIX = ".cdsn"
_PATH_ARGS = {"data", "model_dir", "pred", "ref", "features", "labels", "model"}


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_run_config(out_dir: Path, command: str, args: argparse.Namespace, **resolved) -> None:
    """Record the resolved settings.

    Output locations are left out and input paths are stored relative to the
    output directory, so identical runs under different roots match byte for byte.
    """
    skip = {"func", "out", "threads", "verbose"}
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    for k in _PATH_ARGS & cfg.keys():
        if cfg[k] is not None:
            cfg[k] = Path(os.path.relpath(Path(cfg[k]).resolve(), Path(out_dir).resolve())).as_posix()
    _write_json(out_dir / RUN_CONFIG, {"cinedx_version": __version__, "command": command,
                                       "args": cfg, "resolved": resolved})


def _studies(data_dir: str, need_labels: bool = False):
    root = Path(data_dir)
    if not root.is_dir():
        raise UsageError(f"data directory not found: {root}")
    dirs = list_study_dirs(root)
    if not dirs:
        raise UsageError(f"no studies under {root}")
    studies = [load_study(d) for d in dirs]
    if need_labels:
        missing = [s.patient_id for s in studies if s.reference_labels is None]
        if missing:
            raise UsageError(f"studies without reference labels: {', '.join(missing)}")
    return studies


def _label_dirs(root: str) -> dict[str, tuple[LabelMap, LabelMap]]:
    path = Path(root)
    if not path.is_dir():
        raise UsageError(f"label directory not found: {path}")
    out = {}
    for d in list_study_dirs(path):
        pid, ed, es = load_labels(d)
        out[pid] = (ed, es)
    return out


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args) -> int:
    if args.per_class < 0:
        raise UsageError("--per-class must be >= 0")
    out = _out_dir(args.out)
    overrides = {}
    if args.noise_sd is not None:
        overrides["noise_sd"] = args.noise_sd
    for st in generate_cohort(args.per_class, seed=args.seed, **overrides):
        save_study(st, out / st.patient_id)
    _write_run_config(out, "phantom", args)
    return 0


# ---------------------------------------------------------------------------
# train


def _train_settings(args) -> tuple[SegNetConfig, TrainConfig]:
    if args.profile == "desk":
        net, tc = DESK_NET, DESK_TRAIN
    else:
        net, tc = SegNetConfig(), TrainConfig()
    net = replace(net, init_seed=args.seed)
    if args.width is not None:
        net = replace(net, hidden_width=args.width)
    changes = {"rng_seed": args.seed, "dice_factor2": args.dice_factor2}
    for flag, name in (("iters", "total_iters"), ("cycle", "cycle_M"), ("lr0", "alpha0"),
                       ("batch", "batch_size"), ("patch", "patch"), ("keep", "snapshots_kept"),
                       ("weight_decay", "weight_decay")):
        value = getattr(args, flag)
        if value is not None:
            changes[name] = value
    try:
        tc = replace(tc, **changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return net, tc


def _train_models(studies, net, tc, log_path=None):
    pre = [preprocess_study(s) for s in studies]
    return train(pre, net, tc, log_path=log_path)


def cmd_train(args) -> int:
    studies = _studies(args.data, need_labels=True)
    net, tc = _train_settings(args)
    out = _out_dir(args.out)
    for old in out.glob(f"*{SNAPSHOT_SUFFIX}"):
        old.unlink()
    snaps = _train_models(studies, net, tc, log_path=out / "train_log.csv")
    for s in snaps:
        save_snapshot(s.model, out / f"snapshot_{s.iteration:07d}{SNAPSHOT_SUFFIX}",
                      meta={"iteration": s.iteration, "train": tc.to_dict()})
    _write_run_config(out, "train", args, net=net.to_dict(), train=tc.to_dict(),
                      patients=[s.patient_id for s in studies],
                      snapshots=[s.iteration for s in snaps])
    return 0


# ---------------------------------------------------------------------------
# segment


def _load_snapshots(model_dir: str):
    path = Path(model_dir)
    if not path.is_dir():
        raise UsageError(f"model directory not found: {path}")
    files = sorted(path.glob(f"*{SNAPSHOT_SUFFIX}"))
    if not files:
        raise UsageError(f"no snapshots (*{SNAPSHOT_SUFFIX}) in {path}")
    return [load_snapshot(f) for f in files], files


def cmd_segment(args) -> int:
    models, files = _load_snapshots(args.model_dir)
    studies = _studies(args.data)
    out = _out_dir(args.out)
    for st in studies:
        res = segment_study(models, preprocess_study(st), return_probs=args.dump_probs)
        probs = (res[2], res[3]) if args.dump_probs else None
        save_labels(out / st.patient_id, st.patient_id, res[0], res[1], probs=probs)
    _write_run_config(out, "segment", args, snapshots=[f.name for f in files],
                      patients=[s.patient_id for s in studies])
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _align_reference(ref: LabelMap, pred: LabelMap) -> LabelMap:
    """Bring a native-resolution reference onto the prediction grid (nearest neighbour)."""
    if ref.labels.shape == pred.labels.shape and np.allclose(ref.spacing_mm, pred.spacing_mm):
        return ref
    if not np.isclose(pred.spacing_mm[1], pred.spacing_mm[2]):
        raise UsageError("prediction grid must be isotropic in-plane")
    out = resample_labels(ref, pred.spacing_mm[1])
    if out.labels.shape != pred.labels.shape:
        raise UsageError(f"reference shape {out.labels.shape} does not match prediction {pred.labels.shape}")
    return out


QUANT_INDICES = ("lv_edv", "lv_esv", "lv_ef", "rv_edv", "rv_esv", "rv_ef", "myo_mass_ed")


def cmd_evaluate(args) -> int:
    pred = _label_dirs(args.pred)
    ref = _label_dirs(args.ref)
    only_pred = sorted(set(pred) - set(ref))
    only_ref = sorted(set(ref) - set(pred))
    if only_pred or only_ref:
        raise UsageError("patient sets differ; only in --pred: %s; only in --ref: %s"
                         % (", ".join(only_pred) or "-", ", ".join(only_ref) or "-"))
    report_path = Path(args.out)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    quant = {k: [] for k in QUANT_INDICES}
    quant_rows = []
    for pid in sorted(pred):
        p_pair = pred[pid]
        r_pair = tuple(_align_reference(r, p) for r, p in zip(ref[pid], p_pair))
        for phase, p, r in zip(("ED", "ES"), p_pair, r_pair):
            for name, c in STRUCTURES.items():
                a, b = p.labels == c, r.labels == c
                try:
                    hd = hausdorff_mm(a, b, p.spacing_mm)
                except UndefinedMetricError:
                    hd = float("nan")
                rows.append({"patient_id": pid, "structure": name, "phase": phase,
                             "dice": dice_coef(a, b), "hd_mm": hd})
        try:
            qp, qr = quantify(*p_pair), quantify(*r_pair)
        except UndefinedMetricError as exc:
            log.warning("%s: skipped in volumetric agreement (%s)", pid, exc)
            continue
        for k in QUANT_INDICES:
            quant[k].append((getattr(qr, k), getattr(qp, k)))
            quant_rows.append({"patient_id": pid, "index": k, "reference": getattr(qr, k),
                               "automatic": getattr(qp, k)})

    csv_path = report_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "structure", "phase", "dice", "hd_mm"])
        for r in rows:
            w.writerow([r["patient_id"], r["structure"], r["phase"], repr(r["dice"]), repr(r["hd_mm"])])
    ba_path = report_path.with_name(report_path.stem + "_volumes.csv")
    with open(ba_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "index", "reference", "automatic", "mean", "difference"])
        for r in quant_rows:
            ref_v, auto_v = r["reference"], r["automatic"]
            w.writerow([r["patient_id"], r["index"], repr(ref_v), repr(auto_v),
                        repr((ref_v + auto_v) / 2), repr(auto_v - ref_v)])

    summary = {}
    for name in STRUCTURES:
        for phase in ("ED", "ES"):
            sel = [r for r in rows if r["structure"] == name and r["phase"] == phase]
            entry = {}
            for metric in ("dice", "hd_mm"):
                vals = [r[metric] for r in sel if np.isfinite(r[metric])]
                m, s = mean_sd(vals)
                fmt = "%.2f" if metric == "dice" else "%.1f"
                entry[metric] = {"mean": m, "sd": s, "n": len(vals),
                                 "text": (fmt % m) + " ± " + (fmt % s) if vals else "n/a"}
            summary[f"{name}_{phase}"] = entry
    agreement = {}
    for k, pairs in quant.items():
        if not pairs:
            continue
        ba = bland_altman(pairs)
        try:
            r = pearson([a for a, _ in pairs], [b for _, b in pairs])
        except (UndefinedMetricError, ValueError):
            r = None
        agreement[k] = {"bias": ba.bias, "sd": ba.sd, "loa_low": ba.loa_low, "loa_high": ba.loa_high,
                        "pearson_r": r, "n": len(pairs)}
    report = {
        "cinedx_version": __version__,
        "n_patients": len(pred),
        "difference_convention": "automatic - reference",
        "segmentation": summary,
        "volumetric_agreement": agreement,
        "per_case_csv": csv_path.name,
        "volumes_csv": ba_path.name,
    }
    _write_json(report_path, report)
    _write_run_config(report_path.parent, "evaluate", args)
    return 0


# ---------------------------------------------------------------------------
# features / forest / diagnose


def _feature_table(args):
    """``(patient ids, X, labels)`` from ``--features`` or ``--data`` (+ optional ``--labels``)."""
    if getattr(args, "features", None):
        if not Path(args.features).is_file():
            raise UsageError(f"features file not found: {args.features}")
        return read_features_csv(args.features)
    if not args.data:
        raise UsageError("give --features CSV or --data DIR")
    studies = _studies(args.data)
    seg = _label_dirs(args.labels) if args.labels else None
    X = study_features(studies, seg)
    return [s.patient_id for s in studies], X, [s.diagnosis for s in studies]


def cmd_features(args) -> int:
    ids, X, labels = _feature_table(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features_csv(out, ids, X, labels)
    _write_run_config(out.parent, "features", args)
    return 0


def cmd_fit_forest(args) -> int:
    ids, X, labels = _feature_table(args)
    missing = [pid for pid, lab in zip(ids, labels) if lab is None]
    if missing:
        raise UsageError(f"training samples without a diagnosis: {', '.join(missing)}")
    forest = rf_train(X, labels, n_trees=args.trees, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_forest(forest, out)
    _write_run_config(out.parent, "fit-forest", args, n_samples=len(ids),
                      feature_importance=dict(zip(FEATURE_NAMES, feature_importance(forest).tolist())))
    return 0


def cmd_diagnose(args) -> int:
    if not Path(args.model).is_file():
        raise UsageError(f"forest file not found: {args.model}")
    forest = load_forest(args.model)
    ids, X, labels = _feature_table(args)
    post = rf_posteriors(forest, X)
    patients = []
    for i, pid in enumerate(ids):
        p = post[i]
        rep = DiagnosisReport(p, forest.classes[int(np.argmax(p))], entropy_nats(p), forest.classes)
        patients.append({"patient_id": pid, "reference": labels[i], **rep.to_dict()})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {"cinedx_version": __version__, "classes": list(forest.classes), "patients": patients})
    _write_run_config(out.parent, "diagnose", args)
    return 0


# ---------------------------------------------------------------------------
# crossval


def cmd_crossval(args) -> int:
    studies = _studies(args.data)
    labels = [s.diagnosis for s in studies]
    if any(lab is None for lab in labels):
        raise UsageError("every study needs a diagnosis for cross-validation")
    smallest = min(labels.count(c) for c in set(labels))
    if args.k < 1 or args.k > smallest:
        raise UsageError(f"--k {args.k} must be between 1 and the smallest class count ({smallest})")
    kwargs = {}
    resolved = {}
    if args.feature_source == "reference":
        missing = [s.patient_id for s in studies if s.reference_labels is None]
        if missing:
            raise UsageError(f"studies without reference labels: {', '.join(missing)}")
    elif args.pred:
        kwargs["predicted_labels"] = _label_dirs(args.pred)
    else:
        net, tc = _train_settings(args)
        resolved = {"net": net.to_dict(), "train": tc.to_dict()}

        def segment_fold(train_studies, test_studies):
            snaps = _train_models(train_studies, net, tc)
            models = [s.model for s in snaps]
            return {st.patient_id: segment_study(models, preprocess_study(st))
                    for st in list(train_studies) + list(test_studies)}

        kwargs["segment_fold"] = segment_fold
    res = cross_validate(studies, k=args.k, seed=args.seed, feature_source=args.feature_source,
                         n_trees=args.trees, **kwargs)
    out = _out_dir(args.out)
    _write_json(out / "crossval_report.json", {"cinedx_version": __version__, **res.to_dict()})
    with open(out / "confusion_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reference\\predicted", *DIAGNOSES])
        for c, row in zip(DIAGNOSES, res.confusion):
            w.writerow([c, *row.tolist()])
    _write_run_config(out, "crossval", args, **resolved)
    print(f"accuracy {res.accuracy:.4f}")
    for name, v in res.top_features():
        print(f"  {name}: {v:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=("full", "desk"), default="full",
                   help="base settings: full (150k iterations, 281->151) or desk (600 iterations, small net)")
    p.add_argument("--iters", type=int, help="total iterations")
    p.add_argument("--cycle", type=int, help="learning-rate cycle length M")
    p.add_argument("--lr0", type=float, help="learning rate at the start of each cycle")
    p.add_argument("--batch", type=int, help="minibatch size")
    p.add_argument("--patch", type=int, help="output patch side")
    p.add_argument("--width", type=int, help="hidden channels per layer")
    p.add_argument("--keep", type=int, help="number of snapshots kept")
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--dice-factor2", type=_bool, nargs="?", const=True, default=False,
                   help="use 2*sum(RA)/(sum(R)+sum(A)) instead of the undoubled overlap")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cinedx", description="Cardiac cine-MR segmentation and diagnosis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"cap on BLAS threads (default from ${THREADS_ENV}, else 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the segmentation network and store snapshots")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment studies with a snapshot ensemble")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-probs", action="store_true")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="compare predicted and reference label maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True, help="summary JSON path; CSV tables are written beside it")
    p.set_defaults(func=cmd_evaluate)

    def feature_inputs(p):
        p.add_argument("--features", help="features CSV")
        p.add_argument("--data", help="study directory")
        p.add_argument("--labels", help="segmentations to use instead of the reference labels")

    p = sub.add_parser("features", help="write the 14-feature table")
    feature_inputs(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("fit-forest", help="train the diagnosis forest")
    feature_inputs(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trees", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_forest)

    p = sub.add_parser("diagnose", help="classify studies with a trained forest")
    feature_inputs(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("crossval", help="stratified k-fold evaluation of the diagnosis stage")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trees", type=int, default=1000)
    p.add_argument("--feature-source", choices=("automatic", "reference"), default="reference")
    p.add_argument("--pred", help="precomputed segmentations for --feature-source automatic")
    _add_train_flags(p)
    p.set_defaults(func=cmd_crossval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("cinedx: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except FloatingPointError as exc:
        print(f"cinedx: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (UsageError, StudyFormatError, SnapshotFormatError, ForestFormatError,
            FeatureExtractionError, FileNotFoundError, ValueError) as exc:
        print(f"cinedx: error: {exc}", file=sys.stderr)
        return 2
