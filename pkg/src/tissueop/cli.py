"""Command-line entry points for the full pipeline.

One verb per stage: gen-data, ingest, smooth, resample, train, predict,
fit-fung, fem-predict, run-study, report. Global flags: --config (JSON
overrides), --seed, --out (output directory), --threads (FFT workers).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .errors import ConfigError, DataFormatError, NumericalError
from .fung import (
    DeConfig,
    FungParams,
    fem_predict_sequence,
    fit_fung_de,
    read_records_csv,
)
from .grid import GridField, GridSpec, l2_norm_sq, relative_l2_error
from .ifno import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import (
    Dataset,
    MlsConfig,
    frames_to_samples,
    generate_synthetic,
    ingest_tracked_csv,
    load_dataset,
    mls_smooth,
    save_dataset,
    spline_resample,
    split_study,
    write_tracked_csv,
    TrackedFrames,
)
from .spectral import set_fft_workers
from .study import StudyConfig, StudyReport, check_report_consistency, emit_report, run_study
from .training import TrainConfig, evaluate_relative_errors, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

CONFIG_VERSION = 1

_CONFIG_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "de": DeConfig,
    "generate": None,  # free-form, validated in _generate_kwargs
    "study": None,
}


def _dataclass_from_dict(cls, overrides: dict, context: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(overrides) - set(fields)
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in config section {context!r}; "
            f"allowed: {sorted(fields)}"
        )
    coerced = {}
    for key, val in overrides.items():
        if isinstance(val, list):
            val = tuple(val)
        coerced[key] = val
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {context!r}: {exc}") from exc


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    version = cfg.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version} (expected {CONFIG_VERSION})")
    unknown = set(cfg) - set(_CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown config section(s) {sorted(unknown)}; allowed: {sorted(_CONFIG_SECTIONS)}"
        )
    return cfg


def _build_model_config(cfg: dict) -> ModelConfig:
    return _dataclass_from_dict(ModelConfig, cfg.get("model", {}), "model")


def _build_train_config(cfg: dict, seed: int | None, gamma: float | None = None) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    if seed is not None:
        section["seed"] = seed
    if gamma is not None:
        section["gamma"] = gamma
    return _dataclass_from_dict(TrainConfig, section, "train")


def _build_de_config(cfg: dict) -> DeConfig:
    return _dataclass_from_dict(DeConfig, cfg.get("de", {}), "de")


_GENERATE_KEYS = {
    "n_samples", "protocols", "grid", "extent", "cycles", "noise_std",
    "boundary_wiggle", "peak_jitter", "n_bumps", "alpha",
}


def _generate_kwargs(cfg: dict, args) -> dict:
    section = dict(cfg.get("generate", {}))
    unknown = set(section) - _GENERATE_KEYS
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in config section 'generate'; "
            f"allowed: {sorted(_GENERATE_KEYS)}"
        )
    if args.n_samples is not None:
        section["n_samples"] = args.n_samples
    if args.noise_std is not None:
        section["noise_std"] = args.noise_std
    section.setdefault("n_samples", 210)
    grid_dims = section.pop("grid", [21, 21])
    extent = section.pop("extent", [5.5, 5.5])
    section["grid"] = GridSpec(int(grid_dims[0]), int(grid_dims[1]), (float(extent[0]), float(extent[1])))
    if "protocols" in section:
        section["protocols"] = tuple(int(p) for p in section["protocols"])
    return section


_STUDY_KEYS = {
    "pg_gamma", "include_fung", "fung_first_cycle_only", "n_field_dumps",
    "field_dump_samples",
}


def _build_study_config(cfg: dict, seed: int | None) -> StudyConfig:
    section = dict(cfg.get("study", {}))
    unknown = set(section) - _STUDY_KEYS
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in config section 'study'; "
            f"allowed: {sorted(_STUDY_KEYS)}"
        )
    if "field_dump_samples" in section and section["field_dump_samples"] is not None:
        section["field_dump_samples"] = tuple(section["field_dump_samples"])
    return StudyConfig(
        model=_build_model_config(cfg),
        train=_build_train_config(cfg, seed),
        de=_build_de_config(cfg),
        **section,
    )


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> int:
    kwargs = _generate_kwargs(cfg, args)
    ds = generate_synthetic(seed=args.seed or 0, **kwargs)
    out = _out_dir(args)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples to {out} (grid {ds.grid.nx}x{ds.grid.ny}, "
          f"seed {ds.seed})")
    return EXIT_OK


def cmd_ingest(args, cfg) -> int:
    frames = ingest_tracked_csv(args.input)
    out = _out_dir(args)
    path = os.path.join(out, "tracked.csv")
    write_tracked_csv(frames, path)
    mx, my = frames.lattice_shape
    print(f"ingested {frames.n_frames} frames of a {mx}x{my} lattice "
          f"(protocol {frames.protocol_id}) -> {path}")
    return EXIT_OK


def cmd_smooth(args, cfg) -> int:
    frames = ingest_tracked_csv(args.input)
    samples = frames_to_samples(frames)
    smoothed = mls_smooth(samples, MlsConfig(support_radius=args.support_radius))
    positions = np.stack([frames.positions[0] + s.displacement for s in smoothed])
    out_frames = TrackedFrames(
        positions=positions,
        protocol_id=frames.protocol_id,
        frame_rate_hz=frames.frame_rate_hz,
        provenance="smoothed",
    )
    out = _out_dir(args)
    path = os.path.join(out, "smoothed.csv")
    write_tracked_csv(out_frames, path)
    print(f"smoothed {len(smoothed)} frames -> {path}")
    return EXIT_OK


def cmd_resample(args, cfg) -> int:
    frames = ingest_tracked_csv(args.input)
    scattered = frames_to_samples(frames)
    samples = [spline_resample(s, nx=args.nx, ny=args.ny) for s in scattered]
    ds = Dataset(samples=samples, grid=samples[0].field.spec, seed=args.seed or 0)
    out = _out_dir(args)
    save_dataset(ds, out)
    print(f"resampled {len(samples)} frames onto {args.nx}x{args.ny} -> {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    ds = load_dataset(args.data)
    model_cfg = _build_model_config(cfg)
    train_cfg = _build_train_config(cfg, args.seed, gamma=args.gamma)
    samples = ds.samples
    if args.study is not None:
        train_idx, _ = split_study(ds, args.study, train_cfg.seed)
        samples = [ds.samples[i] for i in train_idx]
    params, history = train(samples, model_cfg, train_cfg)
    out = _out_dir(args)
    ckpt = os.path.join(out, "checkpoint.bin")
    save_checkpoint(params, ckpt)
    history.write_csv(os.path.join(out, "history.csv"))
    print(f"trained on {len(samples)} samples; final train error "
          f"{history.final_train_error:.4f}; checkpoint -> {ckpt}")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    ds = load_dataset(args.data)
    params = load_checkpoint(args.checkpoint)
    indices = _parse_indices(args.samples, len(ds.samples))
    samples = [ds.samples[i] for i in indices]
    errors = evaluate_relative_errors(params, samples)
    out = _out_dir(args)
    path = os.path.join(out, "prediction_errors.csv")
    with open(path, "w") as fh:
        fh.write("sample,protocol_id,frame_index,error\n")
        for i, s, e in zip(indices, samples, errors):
            err = "" if np.isnan(e) else repr(float(e))
            fh.write(f"{i},{s.protocol_id},{s.frame_index},{err}\n")
    defined = errors[~np.isnan(errors)]
    mean = float(defined.mean()) if defined.size else float("nan")
    print(f"evaluated {len(indices)} samples; mean relative error {mean:.4f} -> {path}")
    return EXIT_OK


def cmd_fit_fung(args, cfg) -> int:
    records = read_records_csv(args.records)
    result = fit_fung_de(records, config=_build_de_config(cfg), seed=args.seed or 0)
    out = _out_dir(args)
    path = os.path.join(out, "fung_params.json")
    p = result.params
    with open(path, "w") as fh:
        json.dump(
            {
                "c": p.c, "a1": p.a1, "a2": p.a2, "a3": p.a3,
                "lx": p.lx, "ly": p.ly, "lz": p.lz,
                "objective_mse": result.objective,
                "seed": result.seed,
                "bounds": {k: list(v) for k, v in result.bounds.items()},
                "n_evaluations": result.n_evaluations,
            },
            fh, sort_keys=True, indent=1,
        )
        fh.write("\n")
    print(f"fit {len(records)} records: c={p.c:.4g} a1={p.a1:.4g} a2={p.a2:.4g} "
          f"a3={p.a3:.4g} (mse {result.objective:.4g}) -> {path}")
    return EXIT_OK


def cmd_fem_predict(args, cfg) -> int:
    ds = load_dataset(args.data)
    with open(args.fung) as fh:
        raw = json.load(fh)
    params = FungParams(c=raw["c"], a1=raw["a1"], a2=raw["a2"], a3=raw["a3"],
                        lx=raw.get("lx", 9.0), ly=raw.get("ly", 9.0), lz=raw.get("lz", 0.5))
    indices = _parse_indices(args.samples, len(ds.samples))
    boundaries = [ds.samples[i].boundary for i in indices]
    results = fem_predict_sequence(boundaries, params)
    out = _out_dir(args)
    path = os.path.join(out, "fem_errors.csv")
    with open(path, "w") as fh:
        fh.write("sample,protocol_id,frame_index,error\n")
        for i, res in zip(indices, results):
            s = ds.samples[i]
            err = relative_l2_error(res.field, s.field)
            txt = "" if np.isnan(err) else repr(float(err))
            fh.write(f"{i},{s.protocol_id},{s.frame_index},{txt}\n")
    print(f"FEM-evaluated {len(indices)} samples -> {path}")
    return EXIT_OK


def cmd_run_study(args, cfg) -> int:
    ds = load_dataset(args.data)
    study_cfg = _build_study_config(cfg, args.seed)
    report = run_study(args.study, ds, study_cfg)
    out = _out_dir(args)
    written = emit_report(report, out)
    print(f"study {args.study} complete; wrote {len(written)} files to {out}")
    _print_summary(report)
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    path = os.path.join(args.study_dir, "summary.json")
    if not os.path.exists(path):
        raise DataFormatError(f"no summary.json under {args.study_dir}")
    with open(path) as fh:
        report = StudyReport.from_dict(json.load(fh))
    check_report_consistency(report)
    _print_summary(report)
    return EXIT_OK


def _print_summary(report: StudyReport) -> None:
    print(f"study {report.study_id} (seed {report.seed}):")
    for name, s in sorted(report.models.items()):
        def fmt(v):
            return "   --  " if v is None else f"{100 * v:6.2f}%"
        print(
            f"  {name:10s} train {fmt(s['train_mean_error'])}  "
            f"test {fmt(s['test_mean_error'])}  "
            f"(first cycle: train {fmt(s['first_cycle_train_mean_error'])} "
            f"test {fmt(s['first_cycle_test_mean_error'])})"
        )


def _parse_indices(spec: str | None, n: int) -> list[int]:
    if spec is None or spec == "all":
        return list(range(n))
    try:
        indices = [int(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"--samples must be 'all' or comma-separated ints: {exc}") from exc
    bad = [i for i in indices if not 0 <= i < n]
    if bad:
        raise ConfigError(f"sample indices {bad} outside 0..{n - 1}")
    return indices


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tissueop",
        description="Operator learning for soft-tissue displacement fields",
    )
    parser.add_argument("--config", help="JSON config file with section overrides")
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed")
    parser.add_argument("--out", help="output directory (default: cwd)")
    parser.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="validate and normalize a tracked-node CSV")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("smooth", help="MLS-smooth tracked displacements")
    p.add_argument("--input", required=True)
    p.add_argument("--support-radius", type=float, default=2.5)
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("resample", help="spline-resample tracked frames onto the grid")
    p.add_argument("--input", required=True)
    p.add_argument("--nx", type=int, default=21)
    p.add_argument("--ny", type=int, default=21)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("train", help="train one operator model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--gamma", type=float, default=None, help="physics penalty weight")
    p.add_argument("--study", type=int, default=None, help="train on this study's training split")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="evaluate a checkpoint on dataset samples")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", default="all")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fit-fung", help="fit the constitutive baseline to stress records")
    p.add_argument("--records", required=True, help="stress-stretch CSV")
    p.set_defaults(func=cmd_fit_fung)

    p = sub.add_parser("fem-predict", help="FEM displacement prediction from fitted parameters")
    p.add_argument("--data", required=True)
    p.add_argument("--fung", required=True, help="fitted parameters JSON")
    p.add_argument("--samples", default="all")
    p.set_defaults(func=cmd_fem_predict)

    p = sub.add_parser("run-study", help="run one study scenario end to end")
    p.add_argument("--data", required=True)
    p.add_argument("--study", type=int, required=True, choices=(1, 2, 3, 4))
    p.set_defaults(func=cmd_run_study)

    p = sub.add_parser("report", help="re-render and validate a study report")
    p.add_argument("--study-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        set_fft_workers(args.threads)
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
