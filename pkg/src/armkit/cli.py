"""``armkit`` command line: bank, demo, train, sweep, probe, gradcheck, export."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import aatd
from .config import (
    ConfigError,
    ExperimentConfig,
    canonical_json,
    config_hash,
    experiment_from_dict,
    load_json,
    model_from_dict,
)
from .errors import ArmkitError
from .experiments import (
    alias_demo_1d,
    arm_vs_baseline,
    bank_size_sweep,
    blur_probe,
    export_attention,
    gaussian_prefilter,
    load_dataset,
    placement_sweep,
    train_one,
    train_toy,
    write_probe_csv,
)
from .filter_bank import save_bank, sample_bank

log = logging.getLogger("armkit")

OUT_ENV = "ARMKIT_OUT"
MANIFEST = "run_manifest.json"

TINY_GRADCHECK = {
    "image_size": 16, "patch_size": 4, "embed_dim": 8, "heads": 1, "blocks_per_stage": [1],
    "hierarchical": False, "arm_placement": "after_attention", "arm_stages": [0],
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(args, command: str, tag: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{tag}"


def write_manifest(directory: Path, command: str, config: dict, seed, started: str, outputs) -> Path:
    """Atomically write the run manifest; ``config_hash`` covers the canonical config bytes."""
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "started": started,
        "finished": _now(),
        "outputs": sorted(str(Path(p)) for p in outputs),
    }
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, directory / MANIFEST)
    return directory / MANIFEST


def _unwrap_manifest(data):
    """A run manifest passed as ``--config`` re-runs the experiment it records."""
    if isinstance(data, dict) and {"command", "config", "config_hash"} <= set(data):
        if config_hash(data["config"]) != data["config_hash"]:
            raise ConfigError("run manifest config does not match its config_hash", ("config_hash",))
        data = data["config"]
        if isinstance(data, dict) and "experiment" in data and "sweep" in data:
            data = data["experiment"]
    return data


def read_experiment(source) -> ExperimentConfig:
    return experiment_from_dict(_unwrap_manifest(load_json(source)))


def _load_experiment(args) -> ExperimentConfig:
    cfg = read_experiment(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seeds=(args.seed,))
    return cfg


def _write_config(directory: Path, cfg: ExperimentConfig) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- commands


def cmd_bank(args) -> int:
    started = _now()
    bank = sample_bank(args.seed, args.n, args.k, args.dog_count)
    out = Path(args.out) if args.out else _out_dir(args, "bank", f"s{args.seed}-n{args.n}-k{args.k}") / "bank.aatd"
    dump, side = save_bank(bank, out)
    config = {"seed": args.seed, "n": args.n, "k": args.k, "dog_count": bank.composition["dog"]}
    write_manifest(dump.parent, "bank", config, args.seed, started, [dump, side])
    print(f"wrote {dump} and {side} ({bank.composition['gaussian']} gaussian, {bank.composition['dog']} dog)")
    return 0


def cmd_demo(args) -> int:
    started = _now()
    config = {"freq": args.freq, "rate": args.rate, "duration": args.duration, "prefilter": args.prefilter}
    out = _out_dir(args, "demo", config_hash(config))
    out.mkdir(parents=True, exist_ok=True)
    raw = alias_demo_1d(args.freq, args.rate, duration=args.duration)
    outputs = [out / "spectrum.csv"]
    outputs[0].write_text(raw.to_csv())
    print(f"dominant before sampling: {raw.dominant_before:g} Hz; after: {raw.dominant_after:g} Hz "
          f"(expected alias {raw.expected_alias:g} Hz)")
    if args.prefilter:
        taps = gaussian_prefilter(args.rate, args.rate * 16)
        filt = alias_demo_1d(args.freq, args.rate, taps, duration=args.duration)
        outputs.append(out / "spectrum_prefiltered.csv")
        outputs[1].write_text(filt.to_csv())
        atten = 20 * np.log10(raw.alias_magnitude / filt.alias_magnitude)
        print(f"aliased peak attenuated by {atten:.2f} dB with the Gaussian prefilter")
    write_manifest(out, "demo", config, None, started, outputs)
    print(f"peak_bin_hz={raw.dominant_after:g}")
    return 0


def cmd_train(args) -> int:
    started = _now()
    cfg = _load_experiment(args)
    out = _out_dir(args, "train", config_hash(cfg))
    cfg_path = _write_config(out, cfg)
    records = train_toy(cfg, out, threads=args.threads, export_attn=args.export_attn)
    outputs = [cfg_path, out / "metrics.csv"] + sorted(p for p in out.rglob("*") if p.is_file() and p.suffix == ".aatd")
    write_manifest(out, "train", cfg.to_dict(), list(cfg.seeds), started, outputs)
    for r in records:
        status = "DIVERGED " + r.error if r.diverged else f"test_accuracy={r.final_test_accuracy:.4f}"
        print(f"seed {r.seed}: {status}")
    return 1 if any(r.diverged for r in records) else 0


def cmd_sweep(args) -> int:
    started = _now()
    cfg = _load_experiment(args)
    out = _out_dir(args, f"sweep-{args.kind}", config_hash(cfg))
    cfg_path = _write_config(out, cfg)
    if args.kind == "placement":
        rows = placement_sweep(cfg, out, args.threads)
        table = out / "placement_sweep.csv"
    elif args.kind == "bank_size":
        rows = bank_size_sweep(cfg, args.sizes, out, args.threads)
        table = out / "bank_size_sweep.csv"
    else:
        rows = arm_vs_baseline(cfg, out, args.threads)["rows"]
        table = out / "arm_vs_baseline.csv"
    config = {"sweep": args.kind, "experiment": cfg.to_dict(), "sizes": list(args.sizes)}
    write_manifest(out, "sweep", config, list(cfg.seeds), started, [cfg_path, table, out / "metrics.csv"])
    for row in rows:
        label = row.get("configuration", row.get("n"))
        print(f"{row['table']:>16} {label:>20} acc={row['mean_test_accuracy']:.4f} finite={row['all_finite']}")
    return 0


def cmd_probe(args) -> int:
    from .estimator import ARMViTClassifier

    started = _now()
    cfg = _load_experiment(args)
    out = _out_dir(args, "probe", config_hash(cfg))
    cfg_path = _write_config(out, cfg)
    data = load_dataset(cfg.dataset)
    reports = []
    if args.checkpoint:
        est = ARMViTClassifier.load(args.checkpoint)
        reports.append(blur_probe(est, data.X_test, args.stages, seed=cfg.seeds[0]))
    else:
        for seed in cfg.seeds:
            _, est = train_one(cfg, seed, data)
            reports.append(blur_probe(est, data.X_test, args.stages, seed=seed))
    table = write_probe_csv(reports, out / "probe.csv")
    write_manifest(out, "probe", cfg.to_dict(), list(cfg.seeds), started, [cfg_path, table])
    for rep in reports:
        accs = " ".join(f"stage{s}={a:.3f}" for s, a in sorted(rep.stage_accuracy.items()))
        print(f"seed {rep.seed}: {accs} raw={rep.raw_pixel_accuracy:.3f} earliest>=last={rep.earliest_ge_last}")
    return 0


def tiny_gradcheck_config() -> ExperimentConfig:
    from .arm import ARMConfig
    from .config import DatasetSpec

    return ExperimentConfig(dataset=DatasetSpec(size=16), model=model_from_dict(TINY_GRADCHECK),
                            arm=ARMConfig.with_bank())


def gradcheck_model(cfg: ExperimentConfig | None = None, batch: int = 2, seed: int = 0, tol: float = 1e-4):
    """Central-difference check of cross-entropy w.r.t. every model parameter."""
    from .gradcheck import grad_check
    from .tensor import cross_entropy
    from .vit import init_params, model_forward, named_parameters

    cfg = cfg or tiny_gradcheck_config()
    params = init_params(cfg.model, cfg.arm, seed)
    rng = np.random.default_rng(seed)
    m = cfg.model
    x = rng.normal(size=(batch, m.in_chans, m.image_size, m.image_size))
    y = np.arange(batch) % m.num_classes
    tensors = [t for _, t in named_parameters(params)]
    return grad_check(lambda: cross_entropy(model_forward(x, params, m, True, cfg.arm), y), tensors, h=1e-5, tol=tol)


def cmd_gradcheck(args) -> int:
    started = _now()
    cfg = read_experiment(args.config) if args.config else None
    report = gradcheck_model(cfg, seed=args.seed or 0, tol=args.tol)
    print(f"max_rel_error={report.max_rel_error:.3e}")
    print(report)
    if args.out:
        config = (cfg or tiny_gradcheck_config()).to_dict()
        write_manifest(Path(args.out), "gradcheck", config, args.seed, started, [])
    return 0 if report.passed else 1


def cmd_export(args) -> int:
    from .estimator import ARMViTClassifier
    from .vit import named_buffers, named_parameters

    started = _now()
    est = ARMViTClassifier.load(args.checkpoint)
    out = Path(args.out) if args.out else _out_dir(args, "export", Path(args.checkpoint).name)
    outputs = []
    cfg = est.model_config_
    if est.arm is not None:
        arm_dir = out / "arm"
        names = []
        for name, t in named_parameters(est.params_):
            if set(name.split(".")) & {"arm", "embed_arm", "merge_arm"}:
                outputs.append(aatd.write(arm_dir / f"{name}.aatd", t.data))
                names.append(name)
        for name, arr, _ in named_buffers(est.params_):
            outputs.append(aatd.write(arm_dir / f"{name}.aatd", arr))
            names.append(name)
        bank = est.arm.bank
        meta = {"variant": est.arm.variant, "k": est.arm.k, "n": bank.n if bank else None,
                "seed": bank.seed if bank else None, "tensors": names}
        (arm_dir / "arm_manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        outputs.append(arm_dir / "arm_manifest.json")
    if args.export_attn or args.config:
        data_cfg = read_experiment(args.config) if args.config else ExperimentConfig(model=cfg, arm=est.arm)
        X = load_dataset(data_cfg.dataset).X_test[: args.count]
        outputs += export_attention(est, X, out / "attention")
    write_manifest(out, "export", {"checkpoint": str(args.checkpoint)}, None, started, outputs)
    print(f"exported {len(outputs)} files to {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="armkit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{bank,demo,train,sweep,probe,gradcheck,export}")

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment config: JSON file path or inline JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
        p.add_argument("--threads", type=int, default=1, help="parallel training processes for sweeps")
        p.add_argument("--export-attn", action="store_true", help="dump per-block attention maps as AATD")

    p = sub.add_parser("bank", help="sample a filter bank and write it as AATD + JSON sidecar")
    common(p, config=False)
    p.set_defaults(seed=0)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--dog-count", type=int, default=None)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("demo", help="1-D aliasing demonstration")
    common(p, config=False)
    p.add_argument("--freq", type=float, required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--prefilter", action="store_true", help="also run with a Gaussian anti-aliasing prefilter")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("train", help="train the toy transformer for every seed in the config")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="placement, bank-size or ARM-vs-baseline sweep")
    common(p)
    p.add_argument("--kind", choices=("placement", "bank_size", "arm_vs_baseline"), default="placement")
    p.add_argument("--sizes", type=int, nargs="+", default=[2, 8, 16, 24])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", help="blur-level probe on attention maps per stage")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint directory; trains per seed when omitted")
    p.add_argument("--stages", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="export ARM parameters and attention maps from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=16, help="number of test images for attention dumps")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ArmkitError, OSError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ConfigError):
            err["fields"] = list(exc.fields)
        print("error: " + canonical_json(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
