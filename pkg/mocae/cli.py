"""
Command-Line Front End
======================
python -m mocae <command> [flags]

Commands:
- calibrate     fit calibrators (or the CA/CW x IR/LR study with --grid)
- fuse          mixture of calibrated experts via Refining NMS
- eval          AP / AR / calibration errors of one detection file
- reliability   reliability-diagram data as CSV or SVG
- sweep         background-threshold or sigma_NMS study
- synth         write a seeded synthetic scene (expert files + ground truth)
- oracle-check  AP-optimality check of oracle-scored fusion
- demo          miscalibrated experts: single vs. vanilla vs. calibrated mixture

Settings resolve as defaults <- --config JSON file <- explicit flags.
Exit codes: 0 ok, 1 usage / parse / missing file, 2 domain or fit failure.
"""

import argparse
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, fields

from mocae import config, runtime
from mocae.calib import (
    METHODS,
    MODES,
    CalibratorSet,
    apply_calibrators,
    fit_calibrator_set,
    load_calibrators,
    save_calibrators,
)
from mocae.detections import load_detections, load_ground_truth, write_detections, write_ground_truth
from mocae.errors import ConfigError, DomainError, ParseError
from mocae.fuse import FusionConfig, contribution_shares, fuse_pipeline
from mocae.geometry import AABB, GEOMETRY_KINDS
from mocae.metrics import (
    AP_RULES,
    WEIGHTINGS,
    build_bins,
    calibrator_grid,
    evaluate,
    format_table,
    laece,
    reliability_export,
    sigma_sweep,
    threshold_sweep,
)
from mocae.oracle import SyntheticSceneSpec, demo_spec, gen_synthetic, miscalibration_demo, verify_theorem

DEFAULT_THRESHOLDS = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5)

# ============================================================================
# RUN CONFIGURATION
# ============================================================================


@dataclass
class RunConfig:
    """Every tunable of a run; file keys and flag destinations share these names."""

    # fusion
    nms_kind: str = "soft-linear"
    iou_nms: float = None
    sigma_nms: float = config.SIGMA_NMS
    score_voting: bool = True
    sigma_sv: float = config.SIGMA_SV
    background_threshold: float = config.FUSION_BACKGROUND_THRESHOLD
    top_k: int = config.TOP_K
    prune_after_soft: float = config.PRUNE_AFTER_SOFT
    # calibration
    mode: str = config.CALIBRATION_MODE
    method: str = config.CALIBRATION_METHOD
    max_images: int = None
    # evaluation
    num_bins: int = config.NUM_BINS
    taus: tuple = config.AP_TAUS
    max_dets: int = config.MAX_DETS
    ap_rule: str = config.AP_RULE
    laace_denominator: str = config.LAACE_DENOMINATOR
    # runtime
    kind: str = AABB
    seed: int = None
    threads: int = None

    @classmethod
    def from_sources(cls, config_path=None, overrides=None):
        """Defaults <- JSON config file <- overrides (None values skipped)."""
        known = {f.name for f in fields(cls)}
        values = {}
        if config_path:
            try:
                with open(config_path, "r", encoding="utf-8") as f:
                    payload = json.load(f)
            except json.JSONDecodeError as e:
                raise ParseError(f"{config_path}: malformed JSON ({e})")
            except UnicodeDecodeError as e:
                raise ParseError(f"{config_path}: not UTF-8 text ({e})")
            if not isinstance(payload, dict):
                raise ConfigError(f"{config_path}: config file must hold a JSON object")
            unknown = set(payload) - known
            if unknown:
                raise ConfigError(f"{config_path}: unknown config keys: {sorted(unknown)}")
            values.update(payload)
        for key, value in (overrides or {}).items():
            if key in known and value is not None:
                values[key] = value
        if "taus" in values:
            values["taus"] = tuple(float(t) for t in values["taus"])
        return cls(**values).validate()

    def validate(self):
        self.fusion()
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.max_images is not None and self.max_images < 1:
            raise ConfigError(f"max_images must be >= 1, got {self.max_images}")
        if not isinstance(self.num_bins, int) or self.num_bins < 1:
            raise ConfigError(f"num_bins must be a positive integer, got {self.num_bins!r}")
        if not self.taus or any(not 0.0 < t <= 1.0 for t in self.taus):
            raise ConfigError(f"taus must be a non-empty list in (0, 1], got {self.taus}")
        if not isinstance(self.max_dets, int) or self.max_dets < 1:
            raise ConfigError(f"max_dets must be a positive integer, got {self.max_dets!r}")
        if self.ap_rule not in AP_RULES:
            raise ConfigError(f"ap_rule must be one of {AP_RULES}, got {self.ap_rule!r}")
        if self.laace_denominator not in ("non-empty", "total"):
            raise ConfigError(f"laace_denominator must be 'non-empty' or 'total', got {self.laace_denominator!r}")
        if self.kind not in GEOMETRY_KINDS:
            raise ConfigError(f"kind must be one of {GEOMETRY_KINDS}, got {self.kind!r}")
        runtime.resolve_threads(self.threads)
        return self

    def fusion(self):
        return FusionConfig(
            nms_kind=self.nms_kind,
            iou_nms=self.iou_nms,
            sigma_nms=self.sigma_nms,
            score_voting=self.score_voting,
            sigma_sv=self.sigma_sv,
            background_threshold=self.background_threshold,
            top_k=self.top_k,
            prune_after_soft=self.prune_after_soft,
        )

    def to_dict(self):
        payload = asdict(self)
        payload["taus"] = list(self.taus)
        return payload


# ============================================================================
# CONSOLE & FILE HELPERS
# ============================================================================


def ok(message):
    print(f"✓ {message}")


def warn(message):
    print(f"⚠ {message}", file=sys.stderr)


def fail(message):
    print(f"✗ {message}", file=sys.stderr)


def banner(title):
    print("=" * 60)
    print(title)
    print("=" * 60)


def pct(value):
    return f"{value * config.PERCENT_SCALE:.{config.DECIMAL_PLACES}f}"


def report_path(explicit, kind, name):
    """Explicit path, else Reports/<kind>/<name>."""
    path = explicit or os.path.join(config.REPORT_DIR, kind, name)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    return path


def write_json(payload, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _run_config(args):
    cfg = RunConfig.from_sources(args.config, vars(args))
    runtime.configure(cfg.threads)
    return cfg


# ============================================================================
# COMMANDS
# ============================================================================


def cmd_calibrate(args):
    cfg = _run_config(args)
    dets = load_detections(args.dets, cfg.kind)
    gts = load_ground_truth(args.gt, cfg.kind)
    seed = cfg.seed if cfg.seed is not None else 0

    if args.grid:
        test_dets = load_detections(args.test_dets, cfg.kind) if args.test_dets else dets
        test_gts = load_ground_truth(args.test_gt, cfg.kind) if args.test_gt else gts
        table = calibrator_grid(dets, gts, test_dets, test_gts, cfg.num_bins, cfg.taus, cfg.max_dets, cfg.ap_rule)
        banner("CALIBRATOR STUDY")
        print(format_table(table, ["ap", "laece", "laace", "lamce"]))
        out = report_path(args.out, "Calibration", "calibrator_grid.json")
        write_json({"rows": table.to_dict(orient="records")}, out)
        ok(f"Study saved to: {out}")
        return 0

    cals = fit_calibrator_set(dets, gts, cfg.mode, cfg.method, cfg.max_images, seed)
    out = report_path(args.out, "Calibration", "calibrators.json")
    save_calibrators(cals, out)
    before = laece(build_bins(dets, gts, cfg.num_bins))
    after = laece(build_bins(apply_calibrators(dets, cals), gts, cfg.num_bins))
    ok(f"Fitted {cfg.mode.upper()} {cfg.method.upper()} calibrator(s): {len(cals)}")
    print(f"LaECE before: {pct(before)}")
    print(f"LaECE after:  {pct(after)}")
    ok(f"Calibrators saved to: {out}")
    return 0


def _calibrator_sets(paths, count):
    if not paths or paths == ["identity"]:
        return [CalibratorSet.identity() for _ in range(count)]
    if len(paths) != count:
        raise ConfigError(f"{count} detection file(s) but {len(paths)} calibrator file(s)")
    return [CalibratorSet.identity() if p == "identity" else load_calibrators(p) for p in paths]


def cmd_fuse(args):
    cfg = _run_config(args)
    stores = [load_detections(p, cfg.kind) for p in args.dets]
    cals = _calibrator_sets(args.cal, len(stores))
    fused = fuse_pipeline(stores, cals, cfg.fusion())
    out = report_path(args.out, "Fusion", "fused.json")
    write_detections(fused, out)
    ok(f"Fused {sum(len(s) for s in stores)} detections from {len(stores)} expert(s) into {len(fused)}")
    for expert, share in contribution_shares(fused, range(len(stores))).items():
        print(f"  expert {expert}: {pct(share)} % of survivors")
    ok(f"Fused detections saved to: {out}")
    return 0


def cmd_eval(args):
    cfg = _run_config(args)
    dets = load_detections(args.dets, cfg.kind)
    gts = load_ground_truth(args.gt, cfg.kind)
    report = evaluate(dets, gts, cfg.taus, cfg.max_dets, cfg.num_bins, cfg.ap_rule, cfg.laace_denominator)
    banner("EVALUATION")
    print(report.to_table())
    if args.per_class:
        print()
        print(report.per_class_table())
    out = report_path(args.out, "Evaluation", "eval.json")
    write_json({"config": cfg.to_dict(), "metrics": report.to_dict()}, out)
    ok(f"Report saved to: {out}")
    return 0


def cmd_reliability(args):
    cfg = _run_config(args)
    dets = load_detections(args.dets, cfg.kind)
    gts = load_ground_truth(args.gt, cfg.kind)
    bins = build_bins(dets, gts, cfg.num_bins, args.weighting, args.tau, cfg.max_dets)
    out = report_path(args.out, "Reliability", f"reliability.{args.format}")
    reliability_export(bins, out, args.format)
    ok(f"{len(bins.classes())} class(es) x {cfg.num_bins} bins saved to: {out}")
    return 0


def cmd_sweep(args):
    cfg = _run_config(args)
    stores = [load_detections(p, cfg.kind) for p in args.dets]
    gts = load_ground_truth(args.gt, cfg.kind)
    if args.sigmas:
        cals = _calibrator_sets(args.cal, len(stores))
        table = sigma_sweep(stores, cals, gts, args.sigmas, cfg.fusion(), cfg.taus, cfg.max_dets, cfg.ap_rule)
        banner("SIGMA_NMS SWEEP")
        print(format_table(table, ["ap"]))
        name = "sigma_sweep.csv"
    else:
        if len(stores) != 1:
            raise ConfigError("the threshold sweep takes exactly one detection file")
        thresholds = args.thresholds or list(DEFAULT_THRESHOLDS)
        table = threshold_sweep(stores[0], gts, thresholds, cfg.iou_nms, cfg.taus, cfg.max_dets, cfg.ap_rule)
        banner("BACKGROUND THRESHOLD SWEEP")
        print(format_table(table, ["ap"]))
        name = "threshold_sweep.csv"
    out = report_path(args.out, "Sweeps", name)
    table.to_csv(out, index=False)
    ok(f"Sweep saved to: {out}")
    return 0


def cmd_synth(args):
    cfg = _run_config(args)
    if args.preset == "demo":
        spec = demo_spec(cfg.seed if cfg.seed is not None else config.DEMO_SEED, args.images)
    else:
        spec = SyntheticSceneSpec(num_images=args.images, seed=cfg.seed if cfg.seed is not None else config.ORACLE_SEED)
    stores, gts = gen_synthetic(spec)
    out_dir = args.out_dir or os.path.join(config.REPORT_DIR, "Synthetic")
    os.makedirs(out_dir, exist_ok=True)
    for e, store in enumerate(stores):
        write_detections(store, os.path.join(out_dir, f"expert_{e}.json"))
    write_ground_truth(gts, os.path.join(out_dir, "gt.json"))
    ok(f"{len(stores)} expert file(s) and {len(gts)} ground truth object(s) written to: {out_dir}")
    return 0


def cmd_oracle_check(args):
    cfg = _run_config(args)
    seed = cfg.seed if cfg.seed is not None else config.ORACLE_SEED
    taus = args.oracle_taus or list(config.ORACLE_TAUS)
    fusion = FusionConfig(nms_kind="standard", iou_nms=cfg.iou_nms, score_voting=False, top_k=config.TOP_K_LVIS)
    report = verify_theorem(SyntheticSceneSpec(seed=seed), fusion, taus, args.scenes, args.post)
    banner("AP OPTIMALITY CHECK")
    print(report.to_table())
    if report.rejections:
        warn(f"{report.rejections} scene(s) regenerated: post-processing assumption violated")
    out = report_path(args.out, "Oracle", "oracle_check.json")
    write_json(report.to_dict(), out)
    line = f"pass {report.num_passed}/{report.num_scenes}"
    if report.passed:
        ok(line)
        return 0
    fail(line)
    return 2


def cmd_demo(args):
    cfg = _run_config(args)
    spec = demo_spec(cfg.seed if cfg.seed is not None else config.DEMO_SEED, args.images)
    fusion = FusionConfig(nms_kind="standard", iou_nms=cfg.iou_nms, score_voting=False)
    report = miscalibration_demo(spec, fusion, cfg.mode, cfg.method)
    banner("MISCALIBRATED EXPERTS")
    print(report.to_table())
    out = report_path(args.out, "Demo", "demo.json")
    write_json(report.to_dict(), out)
    ok(f"Report saved to: {out}")
    return 0


# ============================================================================
# ARGUMENT PARSING
# ============================================================================


def _floats(text):
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config file; explicit flags override it (default: none)")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default: ${config.THREADS_ENV} or 1)")
    p.add_argument("--kind", choices=GEOMETRY_KINDS, default=None, help=f"box geometry (default: {AABB})")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: command specific)")


def _add_fusion(p):
    p.add_argument("--nms", dest="nms_kind", choices=config.NMS_KINDS, default=None, help="NMS flavour (default: soft-linear)")
    p.add_argument(
        "--iou-nms",
        type=_floats,
        default=None,
        help=f"NMS IoU threshold (default: {config.IOU_NMS}, {config.IOU_NMS_ROTATED} for rotated boxes)",
    )
    p.add_argument("--sigma-nms", type=_floats, default=None, help=f"Gaussian Soft NMS spread (default: {config.SIGMA_NMS})")
    p.add_argument(
        "--score-voting",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="refine surviving boxes by Score Voting (default: on)",
    )
    p.add_argument("--sigma-sv", type=_floats, default=None, help=f"Score Voting spread (default: {config.SIGMA_SV})")
    p.add_argument(
        "--background-threshold",
        type=_floats,
        default=None,
        help=f"drop detections scored below this first (default: {config.FUSION_BACKGROUND_THRESHOLD})",
    )
    p.add_argument("--top-k", type=int, default=None, help=f"detections kept per image (default: {config.TOP_K})")
    p.add_argument(
        "--prune-after-soft",
        type=_floats,
        default=None,
        help=f"drop Soft NMS rescored detections below this (default: {config.PRUNE_AFTER_SOFT})",
    )


def _add_metrics(p):
    p.add_argument("--bins", dest="num_bins", type=int, default=None, help=f"reliability bins J (default: {config.NUM_BINS})")
    p.add_argument("--max-dets", type=int, default=None, help=f"detections per image evaluated (default: {config.MAX_DETS})")
    p.add_argument("--ap-rule", choices=AP_RULES, default=None, help=f"AP integration rule (default: {config.AP_RULE})")
    p.add_argument(
        "--laace-denominator",
        choices=("non-empty", "total"),
        default=None,
        help=f"LaACE averages over these bins (default: {config.LAACE_DENOMINATOR})",
    )


def _add_calibration(p):
    p.add_argument("--mode", choices=MODES, default=None, help=f"class-agnostic or class-wise (default: {config.CALIBRATION_MODE})")
    p.add_argument("--method", choices=METHODS, default=None, help=f"calibrator family (default: {config.CALIBRATION_METHOD})")


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1 like every other input problem."""

    def error(self, message):
        self.print_usage(sys.stderr)
        fail(f"{self.prog}: {message}")
        sys.exit(1)


def build_parser():
    parser = ArgumentParser(prog="mocae", description="Mixture of calibrated object detectors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit calibrators on a held-out split")
    p.add_argument("--dets", required=True, help="held-out detections JSON")
    p.add_argument("--gt", required=True, help="held-out ground truth JSON")
    p.add_argument("--out", default=None, help="output path (default: Reports/Calibration/calibrators.json)")
    p.add_argument("--max-images", type=int, default=None, help="fit on a seeded subset of images (default: all)")
    p.add_argument("--grid", action="store_true", help="run the CA/CW x IR/LR study instead (default: off)")
    p.add_argument("--test-dets", default=None, help="study test detections (default: --dets)")
    p.add_argument("--test-gt", default=None, help="study test ground truth (default: --gt)")
    _add_calibration(p)
    _add_metrics(p)
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fuse", help="fuse calibrated experts")
    p.add_argument("--dets", nargs="+", required=True, help="one detections JSON per expert")
    p.add_argument(
        "--cal", nargs="+", default=None, help="one calibrator JSON per expert, or 'identity' (default: identity)"
    )
    p.add_argument("--out", default=None, help="output path (default: Reports/Fusion/fused.json)")
    _add_fusion(p)
    _add_common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="AP, AR and calibration errors")
    p.add_argument("--dets", required=True, help="detections JSON")
    p.add_argument("--gt", required=True, help="ground truth JSON")
    p.add_argument("--out", default=None, help="output path (default: Reports/Evaluation/eval.json)")
    p.add_argument("--per-class", action="store_true", help="also print per-class AP (default: off)")
    _add_metrics(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reliability", help="reliability-diagram data")
    p.add_argument("--dets", required=True, help="detections JSON")
    p.add_argument("--gt", required=True, help="ground truth JSON")
    p.add_argument("--format", choices=("csv", "svg"), default="csv", help="output format (default: csv)")
    p.add_argument("--weighting", choices=WEIGHTINGS, default="reduced", help="bin target (default: reduced)")
    p.add_argument("--tau", type=_floats, default=config.LAECE_TAU, help=f"TP threshold of the precision weighting (default: {config.LAECE_TAU})")
    p.add_argument("--out", default=None, help="output path (default: Reports/Reliability/reliability.<format>)")
    _add_metrics(p)
    _add_common(p)
    p.set_defaults(func=cmd_reliability)

    p = sub.add_parser("sweep", help="background-threshold or sigma_NMS study")
    p.add_argument("--dets", nargs="+", required=True, help="detections JSON (one per expert for --sigmas)")
    p.add_argument("--gt", required=True, help="ground truth JSON")
    p.add_argument(
        "--thresholds",
        nargs="+",
        type=_floats,
        default=None,
        help=f"background thresholds (default: {' '.join(str(t) for t in DEFAULT_THRESHOLDS)})",
    )
    p.add_argument("--sigmas", nargs="+", type=_floats, default=None, help="run the sigma_NMS study over these values (default: off)")
    p.add_argument("--cal", nargs="+", default=None, help="calibrators for the sigma_NMS study (default: identity)")
    p.add_argument("--out", default=None, help="output CSV (default: Reports/Sweeps/<study>.csv)")
    _add_fusion(p)
    _add_metrics(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a seeded synthetic scene")
    p.add_argument("--preset", choices=("oracle", "demo"), default="demo", help="expert settings (default: demo)")
    p.add_argument("--images", type=int, default=config.DEMO_IMAGES, help=f"number of images (default: {config.DEMO_IMAGES})")
    p.add_argument("--out-dir", default=None, help="output directory (default: Reports/Synthetic)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("oracle-check", help="AP optimality of oracle-scored fusion")
    p.add_argument("--scenes", type=int, default=config.ORACLE_SCENES, help=f"number of scenes (default: {config.ORACLE_SCENES})")
    p.add_argument(
        "--taus",
        dest="oracle_taus",
        nargs="+",
        type=_floats,
        default=None,
        help=f"IoU thresholds checked (default: {' '.join(str(t) for t in config.ORACLE_TAUS)})",
    )
    p.add_argument("--post", choices=("fusion", "reference"), default="fusion", help="post-processing checked (default: fusion)")
    p.add_argument("--iou-nms", type=_floats, default=None, help=f"standard NMS IoU threshold (default: {config.IOU_NMS})")
    p.add_argument("--out", default=None, help="output path (default: Reports/Oracle/oracle_check.json)")
    _add_common(p)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("demo", help="miscalibrated experts: single vs. vanilla vs. calibrated mixture")
    p.add_argument("--images", type=int, default=config.DEMO_IMAGES, help=f"images per split (default: {config.DEMO_IMAGES})")
    p.add_argument("--iou-nms", type=_floats, default=None, help=f"standard NMS IoU threshold (default: {config.IOU_NMS})")
    p.add_argument("--out", default=None, help="output path (default: Reports/Demo/demo.json)")
    _add_calibration(p)
    _add_common(p)
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            code = args.func(args)
        except (ParseError, OSError) as e:
            fail(str(e))
            code = 1
        except DomainError as e:
            fail(str(e))
            code = 2
    for w in caught:
        warn(str(w.message))
    return code


if __name__ == "__main__":
    sys.exit(main())
