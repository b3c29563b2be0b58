"""``nice`` command line: one JSON run config drives every pipeline stage.

Exit codes: 0 success, 2 usage, 3 config validation, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis as an
from . import preprocess as pp
from .contrastive import TrainConfig, train
from .data_io import (EEGEpochSet, SynthSpec, load_epochs, load_feature_bank, pair,
                      save_epochs, save_feature_bank, save_ground_truth, split_train_val,
                      synth_generate)
from .encoders import SPATIAL_MODULES, HyperParams, load_checkpoint, save_checkpoint
from .zeroshot import build_templates

log = logging.getLogger("nice")

COMMANDS = ("preprocess", "train", "eval", "ablate", "rdm", "tfr", "gradcam", "synth", "gradcheck")
EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- schema ----------------------------------------------------------------
# Each leaf is (kind, default). Kinds: int, float, bool, str, path, paths
# (one path or a list), optional variants "?x", enumerations as tuples, and
# list kinds "[x]".

SCHEMA = {
    "seed": ("int", 0),
    "paths": {
        "train_epochs": ("?paths", None),
        "test_epochs": ("?paths", None),
        "feature_bank": ("?path", None),
        "template_bank": ("?path", None),
        "output_dir": ("path", "nice_run"),
        "checkpoint": ("?path", None),
        "category_map": ("?path", None),
        "region_map": ("?path", None),
    },
    "hyper": {
        "k": ("int", 40),
        "m1": ("int", 25),
        "m2": ("int", 51),
        "s2": ("int", 5),
        "spatial_module": (SPATIAL_MODULES, "none"),
        "ga_residual": ("bool", True),
    },
    "train": {
        "batch_size": ("int", 1000),
        "epochs": ("int", 200),
        "lr": ("float", 2e-4),
        "beta1": ("float", 0.5),
        "beta2": ("float", 0.999),
        "eps": ("float", 1e-8),
        "n_val": ("int", 740),
        "max_scale": ("?float", 100.0),
        "average_repetitions": ("bool", True),
    },
    "preprocess": {
        "baseline_ms": ("?float", 200.0),
        "target_hz": ("float", 250.0),
        "crop_ms": ("[float]", [0.0, 1000.0]),
        "mvnn_shrinkage": ("?float", 0.1),
    },
    "analysis": {
        "time_mode": (("forward", "backward", "segment"), "segment"),
        "time_step_ms": ("float", 100.0),
        "time_width_ms": ("float", 100.0),
        "retrain_time": ("bool", False),
        "regions": ("[str]", list(pp.REGIONS)),
        "bands": ("[str]", list(pp.BANDS)),
        "fractions": ("[float]", list(an.DEFAULT_FRACTIONS)),
        "size_axis": (("conditions", "repetitions"), "conditions"),
        "test_reps": ("[int]", list(an.DEFAULT_TEST_REPS)),
        "eval_reps": ("?int", None),
        "feature_average": ("bool", False),
        "tfr_channels": ("str", "occipital"),
        "tfr_freqs": ("[float]", [float(f) for f in range(2, 101, 2)]),
        "gradcam_trials": ("?int", None),
        "n_jobs": ("int", 1),
    },
}

POSITIVE = {"hyper.k", "hyper.m1", "hyper.m2", "hyper.s2", "train.batch_size", "train.epochs",
            "train.lr", "train.eps", "preprocess.target_hz", "analysis.time_step_ms",
            "analysis.time_width_ms", "analysis.n_jobs"}


def _check(kind, value, where):
    if isinstance(kind, tuple):
        if value not in kind:
            raise ConfigError(f"field '{where}' must be one of {list(kind)}, got {value!r}")
        return value
    if kind.startswith("?"):
        return None if value is None else _check(kind[1:], value, where)
    if kind.startswith("["):
        if not isinstance(value, list):
            raise ConfigError(f"field '{where}' must be a list")
        return [_check(kind[1:-1], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field '{where}' must be an integer, got {value!r}")
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field '{where}' must be a number, got {value!r}")
        value = float(value)
    elif kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"field '{where}' must be true or false, got {value!r}")
    elif kind in ("str", "path"):
        if not isinstance(value, str) or not value:
            raise ConfigError(f"field '{where}' must be a non-empty string, got {value!r}")
    elif kind == "paths":
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not value or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"field '{where}' must be a path or a non-empty list of paths")
    return value


def _validate(node, schema, prefix=""):
    if not isinstance(node, dict):
        raise ConfigError(f"field '{prefix.rstrip('.') or '<root>'}' must be an object")
    unknown = sorted(set(node) - set(schema))
    if unknown:
        raise ConfigError(f"unknown field '{prefix}{unknown[0]}'")
    out = {}
    for key, sub in schema.items():
        where = prefix + key
        if isinstance(sub, dict):
            out[key] = _validate(node.get(key, {}), sub, where + ".")
            continue
        kind, default = sub
        value = node.get(key, copy.deepcopy(default))
        value = _check(kind, value, where)
        if where in POSITIVE and value is not None and not value > 0:
            raise ConfigError(f"field '{where}' must be positive, got {value!r}")
        out[key] = value
    return out


def validate_config(raw: dict) -> dict:
    """Fill defaults and type-check; errors name the offending field."""
    cfg = _validate(raw, SCHEMA)
    t = cfg["train"]
    if not (0 <= t["beta1"] < 1):
        raise ConfigError("field 'train.beta1' must lie in [0, 1)")
    if not (0 <= t["beta2"] < 1):
        raise ConfigError("field 'train.beta2' must lie in [0, 1)")
    if t["batch_size"] < 2:
        raise ConfigError("field 'train.batch_size' must be >= 2")
    if t["n_val"] < 1:
        raise ConfigError("field 'train.n_val' must be >= 1")
    crop = cfg["preprocess"]["crop_ms"]
    if len(crop) != 2 or not crop[0] < crop[1]:
        raise ConfigError("field 'preprocess.crop_ms' must be [start, end] with start < end")
    shrink = cfg["preprocess"]["mvnn_shrinkage"]
    if shrink is not None and not 0 <= shrink <= 1:
        raise ConfigError("field 'preprocess.mvnn_shrinkage' must lie in [0, 1]")
    for i, name in enumerate(cfg["analysis"]["bands"]):
        if name not in pp.BANDS:
            raise ConfigError(f"field 'analysis.bands[{i}]' must be one of {list(pp.BANDS)}")
    for i, f in enumerate(cfg["analysis"]["fractions"]):
        if not 0 < f <= 1:
            raise ConfigError(f"field 'analysis.fractions[{i}]' must lie in (0, 1]")
    for i, r in enumerate(cfg["analysis"]["test_reps"]):
        if r < 1:
            raise ConfigError(f"field 'analysis.test_reps[{i}]' must be >= 1")
    return cfg


def _apply_override(raw: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"field '{key}' does not name a config entry")
    node[parts[-1]] = value


def load_config(path=None, overrides=(), out=None, seed=None) -> dict:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    for item in overrides:
        _apply_override(raw, item)
    if out is not None:
        raw.setdefault("paths", {})["output_dir"] = out
    if seed is not None:
        raw["seed"] = seed
    return validate_config(raw)


def _require(cfg, *fields):
    for f in fields:
        value = cfg["paths"][f]
        if value is None:
            raise ConfigError(f"field 'paths.{f}' is required for this command")
        for p in value if isinstance(value, list) else [value]:
            if not Path(p).exists():
                raise ConfigError(f"field 'paths.{f}': {p} does not exist")


def n_workers(requested: int) -> int:
    cap = os.environ.get("NICE_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise ConfigError(f"NICE_THREADS must be an integer, got {cap!r}") from None
    return requested


# -- data helpers ----------------------------------------------------------

def concat_epochs(sets: list[EEGEpochSet]) -> EEGEpochSet:
    """Stack recordings; repeated stimuli across sets count as extra repetitions."""
    if len(sets) == 1:
        return sets[0]
    first = sets[0]
    for s in sets[1:]:
        if s.channel_names != first.channel_names or s.sample_rate != first.sample_rate:
            raise ValueError("recordings differ in montage or sample rate")
    reps, offset = [], 0
    for s in sets:
        reps.append(s.repetition_index + offset)
        offset += int(s.repetition_index.max()) + 1
    return EEGEpochSet(np.concatenate([s.epochs for s in sets]), first.sample_rate,
                       first.channel_names, [i for s in sets for i in s.stimulus_ids],
                       [c for s in sets for c in s.concept_ids], np.concatenate(reps), first.tmin)


def _epochs(cfg, key):
    return concat_epochs([load_epochs(p) for p in cfg["paths"][key]])


def _hyper(cfg, eeg, D):
    h = cfg["hyper"]
    return HyperParams(C=len(eeg.channel_names), T=eeg.n_samples, D=D, **h)


def _train_cfg(cfg):
    t = {k: v for k, v in cfg["train"].items() if k != "average_repetitions"}
    return TrainConfig(seed=cfg["seed"], **t)


def _checkpoint_path(cfg):
    return Path(cfg["paths"]["checkpoint"] or Path(cfg["paths"]["output_dir"]) / "model.nice")


def _eval_set(cfg):
    _require(cfg, "test_epochs", "template_bank")
    eeg = _epochs(cfg, "test_epochs")
    bank = load_feature_bank(cfg["paths"]["template_bank"])
    concepts = list(dict.fromkeys(eeg.concept_ids))
    tb = build_templates(bank, concepts, stimulus_ids=eeg.stimulus_ids)
    return an.EvalSet(eeg, tb)


def _model(cfg):
    path = _checkpoint_path(cfg)
    if not path.exists():
        raise ConfigError(f"field 'paths.checkpoint': {path} does not exist")
    return load_checkpoint(path)


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1))


# -- commands --------------------------------------------------------------

def cmd_preprocess(cfg, args, out: Path):
    _require(cfg, "train_epochs")
    p = cfg["preprocess"]
    steps = []

    def condition(eeg):
        if p["baseline_ms"] is not None and eeg.tmin < 0:
            eeg = pp.baseline_correct(eeg, p["baseline_ms"])
        if eeg.sample_rate != p["target_hz"]:
            eeg = pp.downsample(eeg, p["target_hz"])
        return pp.crop(eeg, p["crop_ms"][0] / 1000, p["crop_ms"][1] / 1000)

    train_eeg = condition(_epochs(cfg, "train_epochs"))
    test_eeg = condition(_epochs(cfg, "test_epochs")) if cfg["paths"]["test_epochs"] else None
    steps += ["baseline", "downsample", "crop"]
    if p["mvnn_shrinkage"] is not None:
        op = pp.fit_whitener(train_eeg, p["mvnn_shrinkage"])
        train_eeg = pp.apply_whitener(op, train_eeg)
        if test_eeg is not None:
            test_eeg = pp.apply_whitener(op, test_eeg)
        _write_json(out / "whitener.json", op.to_dict())
        steps.append("mvnn")
    outputs = {"train_epochs": str(out / "train_pre.eegt")}
    save_epochs(train_eeg, outputs["train_epochs"])
    if test_eeg is not None:
        outputs["test_epochs"] = str(out / "test_pre.eegt")
        save_epochs(test_eeg, outputs["test_epochs"])
    return {"steps": steps, "outputs": outputs}


def cmd_train(cfg, args, out: Path):
    _require(cfg, "train_epochs", "feature_bank")
    eeg = _epochs(cfg, "train_epochs")
    if cfg["train"]["average_repetitions"]:
        eeg = pp.average_repetitions(eeg)
    bank = load_feature_bank(cfg["paths"]["feature_bank"])
    ds = pair(eeg, bank)
    tcfg = _train_cfg(cfg)
    if tcfg.n_val >= len(ds):
        raise ConfigError(f"field 'train.n_val' ({tcfg.n_val}) must be below the {len(ds)} pairs")
    tr, va = split_train_val(ds, tcfg.n_val, tcfg.seed)
    hyper = _hyper(cfg, eeg, bank.dim)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    tic = time.perf_counter()
    best, state = train(tr, va, hyper, tcfg, log_path=log_path)
    ckpt = _checkpoint_path(cfg)
    save_checkpoint(best, ckpt)
    return {"checkpoint": str(ckpt), "best_epoch": state.best_epoch,
            "best_val_loss": state.best_val_loss, "seconds": time.perf_counter() - tic,
            "n_train": len(tr), "n_val": len(va)}


def cmd_eval(cfg, args, out: Path):
    params = _model(cfg)
    test = _eval_set(cfg)
    a = cfg["analysis"]
    report = an.evaluate(params, test, n_reps=a["eval_reps"], feature_average=a["feature_average"])
    report.to_json(out / "similarity.json")
    report.to_csv(out / "metrics.csv")
    metrics = {f"top{k}": float(np.mean(v)) for k, v in sorted(report.topk_hits.items())}
    metrics["n_trials"] = int(len(report.true_index))
    _write_json(out / "metrics.json", metrics)
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items() if k.startswith("top")))
    return metrics


def cmd_ablate(cfg, args, out: Path):
    a = cfg["analysis"]
    mode = args.mode
    jobs = n_workers(a["n_jobs"])
    points = out / f"ablate_{mode}_points"
    test = _eval_set(cfg)
    ckpt = _checkpoint_path(cfg)
    key_doc = {"config": cfg, "mode": mode,
               "checkpoint": an.file_digest(ckpt) if ckpt.exists() else None}
    run_key = hashlib.sha256(json.dumps(key_doc, sort_keys=True).encode()).hexdigest()[:16]
    if mode in ("time", "space", "reps"):
        params = _model(cfg)
    if mode in ("band", "size") or (mode == "time" and a["retrain_time"]):
        _require(cfg, "train_epochs", "feature_bank")
        raw = _epochs(cfg, "train_epochs")
        bank = load_feature_bank(cfg["paths"]["feature_bank"])
        eeg0 = _epochs(cfg, "test_epochs")
        factory = an.make_factory(_hyper(cfg, eeg0, bank.dim), _train_cfg(cfg))
        avg = pp.average_repetitions(raw) if cfg["train"]["average_repetitions"] else raw
    if mode == "time":
        kwargs = {}
        if a["retrain_time"]:
            kwargs = dict(factory=factory, train_ds=pair(avg, bank))
        result = an.sweep_time(params, test, a["time_mode"], a["time_step_ms"], a["time_width_ms"],
                               out_dir=points, n_jobs=jobs, run_key=run_key, **kwargs)
    elif mode == "space":
        result = an.sweep_regions(params, test, a["regions"], _region_overrides(cfg), out_dir=points, n_jobs=jobs, run_key=run_key)
    elif mode == "band":
        bands = [pp.BANDS[b] for b in a["bands"]]
        result = an.sweep_bands(factory, pair(avg, bank), test, bands, out_dir=points, n_jobs=jobs, run_key=run_key)
    elif mode == "size":
        result = an.sweep_training_size(factory, raw, bank, test, a["fractions"], a["size_axis"],
                                        cfg["seed"], out_dir=points, n_jobs=jobs, run_key=run_key)
    else:
        result = an.sweep_test_repetitions(params, test, a["test_reps"], out_dir=points, n_jobs=jobs, run_key=run_key)
    result.to_csv(out / f"ablate_{mode}.csv")
    an.write_manifest(out / f"ablate_{mode}.json", {mode: result}, seeds=[cfg["seed"]],
                      checkpoint=ckpt if ckpt.exists() and mode in ("time", "space", "reps") else None)
    for v, t1, t5 in zip(result.values, result.top1, result.top5):
        print(f"{v}\ttop1={t1:.4f}\ttop5={t5:.4f}")
    return {"csv": str(out / f"ablate_{mode}.csv"), "points": len(result.values)}


def cmd_rdm(cfg, args, out: Path):
    _require(cfg, "category_map")
    params = _model(cfg)
    test = _eval_set(cfg)
    cmap = json.loads(Path(cfg["paths"]["category_map"]).read_text())
    m = an.rdm(params, test, cmap)
    m.to_csv(out / "rdm.csv")
    within, between = m.block_means()
    doc = {"within_category": within, "between_category": between,
           "categories": sorted(set(m.categories))}
    _write_json(out / "rdm_summary.json", doc)
    return doc


def _region_overrides(cfg):
    path = cfg["paths"]["region_map"]
    return pp.load_region_map(path) if path else None


def cmd_tfr(cfg, args, out: Path):
    _require(cfg, "test_epochs")
    eeg = _epochs(cfg, "test_epochs")
    spec = args.channels or cfg["analysis"]["tfr_channels"]
    channels = spec if spec in pp.REGIONS else [c for c in spec.split(",") if c]
    tf = an.time_frequency(eeg, channels, cfg["analysis"]["tfr_freqs"],
                           overrides=_region_overrides(cfg))
    tf.to_csv(out / "tfr.csv")
    peak = float(tf.freqs[np.argmax(tf.power.mean(axis=1))])
    return {"csv": str(out / "tfr.csv"), "peak_hz": peak}


def cmd_gradcam(cfg, args, out: Path):
    params = _model(cfg)
    test = _eval_set(cfg)
    eeg = test.eeg
    if len(set(eeg.stimulus_ids)) < eeg.n_trials:
        eeg = pp.average_repetitions(eeg)
    n = cfg["analysis"]["gradcam_trials"]
    if n is not None:
        eeg = eeg.subset(np.arange(min(n, eeg.n_trials)))
    targets = test.templates.templates[[test.templates.index_of(c) for c in eeg.concept_ids]]
    weights = an.grad_cam_spatial(params, eeg.epochs, targets)
    with open(out / "gradcam.csv", "w") as fh:
        fh.write("electrode,weight\n")
        for name, w in zip(eeg.channel_names, weights):
            fh.write(f"{name},{w:.6f}\n")
    top = [eeg.channel_names[i] for i in np.argsort(-weights, kind="stable")[:10]]
    return {"csv": str(out / "gradcam.csv"), "top10": top}


def _synth_specs(doc: dict, seed: int):
    allowed = set(SynthSpec.__dataclass_fields__)
    shared = {k: v for k, v in doc.items() if k not in ("train", "test")}
    for where, part in (("", shared), ("train.", doc.get("train", {})), ("test.", doc.get("test", {}))):
        unknown = sorted(set(part) - allowed)
        if unknown:
            raise ConfigError(f"unknown field '{where}{unknown[0]}' in synth spec")
    train_kw = dict(concept_prefix="tr", seed=100 + seed, mixing_seed=seed)
    test_kw = dict(n_concepts=50, images_per_concept=1, repetitions=80, template_images=5,
                   concept_prefix="te", seed=200 + seed, mixing_seed=seed)
    train_kw.update(shared, **doc.get("train", {}))
    test_kw.update(shared, **doc.get("test", {}))
    for kw in (train_kw, test_kw):
        for key in ("signal_window", "signal_electrodes"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
    try:
        return SynthSpec(**train_kw), SynthSpec(**test_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth spec: {exc}") from None


def cmd_synth(cfg, args, out: Path):
    doc = {}
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"synth spec {args.spec}: {exc}") from None
    train_spec, test_spec = _synth_specs(doc, cfg["seed"])
    if train_spec.concept_prefix == test_spec.concept_prefix:
        raise ConfigError("field 'test.concept_prefix' must differ from the training prefix")
    eeg, bank, truth = synth_generate(train_spec)
    teeg, tbank, ttruth = synth_generate(test_spec)
    if test_spec.template_images < 1:
        raise ConfigError("field 'test.template_images' must be >= 1 for zero-shot templates")
    tpl_rows = [i for i, s in enumerate(tbank.image_ids) if "_tpl" in s]
    paths = {
        "train_epochs": str(out / "train.eegt"),
        "test_epochs": str(out / "test.eegt"),
        "feature_bank": str(out / "train_images.feat"),
        "template_bank": str(out / "templates.feat"),
    }
    save_epochs(eeg, paths["train_epochs"])
    save_epochs(teeg, paths["test_epochs"])
    save_feature_bank(bank, paths["feature_bank"])
    save_feature_bank(tbank.subset(tpl_rows), paths["template_bank"])
    save_ground_truth(truth, out / "truth_train")
    save_ground_truth(ttruth, out / "truth_test")
    # synthetic channels carry no 10-10 names; assign contiguous blocks to regions
    blocks = np.array_split(np.arange(test_spec.C), len(pp.REGIONS))
    rmap = {teeg.channel_names[i]: region for region, idx in zip(pp.REGIONS, blocks) for i in idx}
    paths["region_map"] = str(out / "regions.json")
    _write_json(paths["region_map"], rmap)
    if ttruth.categories:
        names = list(an.CATEGORY_ORDER)
        cmap = {c: names[i] if i < len(names) else f"category{i}"
                for c, i in ttruth.categories.items()}
        paths["category_map"] = str(out / "categories.json")
        _write_json(paths["category_map"], cmap)
    run_cfg = copy.deepcopy(cfg)
    run_cfg["paths"].update(paths)
    _write_json(out / "config.json", run_cfg)
    _write_json(out / "synth_spec.json", {"train": _spec_dict(train_spec), "test": _spec_dict(test_spec)})
    return {"outputs": paths, "config": str(out / "config.json")}


def _spec_dict(spec):
    from dataclasses import asdict
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def cmd_gradcheck(cfg, args, out: Path):
    from .gradcheck import run_suite
    reports, seconds = run_suite(n_points=args.points, seed=cfg["seed"])
    for r in reports:
        print(r)
    failed = [r.name for r in reports if not r.passed]
    doc = {"seconds": seconds, "failed": failed,
           "cases": {r.name: r.max_rel_error for r in reports}}
    _write_json(out / "gradcheck.json", doc)
    print(f"{len(reports) - len(failed)}/{len(reports)} passed in {seconds:.1f}s")
    if failed:
        raise RuntimeError(f"gradient check failed for {', '.join(failed)}")
    return doc


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--out", help="output directory (overrides paths.output_dir)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.epochs=5 (value parsed as JSON)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nice", description="EEG-to-image contrastive decoding")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("preprocess", parents=[common], help="baseline, resample, crop, whiten")
    sub.add_parser("train", parents=[common], help="train the EEG encoder")
    sub.add_parser("eval", parents=[common], help="zero-shot top-k on the test set")
    p = sub.add_parser("ablate", parents=[common], help="time/space/band/size/reps sweeps")
    p.add_argument("--mode", required=True, choices=("time", "space", "band", "size", "reps"))
    sub.add_parser("rdm", parents=[common], help="concept similarity matrix")
    p = sub.add_parser("tfr", parents=[common], help="Morlet time-frequency power")
    p.add_argument("--channels", help="region name or comma-separated channel labels")
    sub.add_parser("gradcam", parents=[common], help="per-electrode Grad-CAM weights")
    p = sub.add_parser("synth", parents=[common], help="write a planted-signal dataset")
    p.add_argument("--spec", help="JSON synthetic dataset spec")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--points", type=int, default=10, help="coordinates sampled per input")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.out, args.seed)
        n_workers(1)
        out = Path(cfg["paths"]["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"{args.command}.config.json", cfg)
        result = HANDLERS[args.command](cfg, args, out)
        _write_json(out / f"{args.command}.result.json", result)
    except ConfigError as exc:
        print(f"nice: config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - every failure maps to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"nice {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
