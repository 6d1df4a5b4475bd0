"""Study execution and report emission.

A study run splits the dataset, trains the purely data-driven operator
and the physics-guided variant from the same seed, fits the Fung
baseline on the training split's stress records and predicts via the
membrane FEM, evaluates everything on both splits, and emits a report:

    summary.json            per-model error summaries + config echo
    per_sample_errors.csv   one row per (model, sample)
    loss_history.csv        training traces of both operator models
    fung_params.json        fitted baseline parameters
    fields/<...>.csv        true/predicted field dumps for representative
                            samples

Error accounting: relative errors are averaged per sample; samples with
near-zero reference norm are excluded from averages and counted. The
pooled variant (norm of concatenated errors over the split) is reported
alongside. Following the testing protocol, the FEM baseline is by
default evaluated on first-cycle samples only; summaries therefore also
carry first-cycle-restricted numbers for every model so the comparison
is like for like.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .fung import DeConfig, DeResult, fem_predict_sequence, fit_fung_de
from .grid import GridSpec, Sample, l2_norm_sq, node_coordinates, relative_error_floor
from .ifno import IfnoParams, ModelConfig, subnet_forward
from .pipeline import Dataset, split_study
from .training import TrainConfig, TrainHistory, prepare_arrays, train

MODEL_VANILLA = "ifno"
MODEL_PG = "pg_ifno"
MODEL_FUNG = "fung_fem"


@dataclass(frozen=True)
class StudyConfig:
    """Everything a study run needs besides the dataset."""

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    pg_gamma: float = 1.0
    de: DeConfig = DeConfig()
    fung_bounds: dict | None = None
    include_fung: bool = True
    fung_first_cycle_only: bool = True
    n_field_dumps: int = 2
    field_dump_samples: tuple[int, ...] | None = None

    def echo(self) -> dict:
        return {
            "model": {
                "width": self.model.width,
                "proj_width": self.model.proj_width,
                "modes": list(self.model.modes),
                "depth": self.model.depth,
                "activation": self.model.activation,
                "total_time": self.model.total_time,
            },
            "train": {
                "epochs_per_depth": self.train.epochs_per_depth,
                "lr0": self.train.lr0,
                "lr_decay": self.train.lr_decay,
                "lr_decay_every": self.train.lr_decay_every,
                "decay_during_training": self.train.decay_during_training,
                "depth_schedule": list(self.train.depth_schedule),
                "batch_size": self.train.batch_size,
                "seed": self.train.seed,
            },
            "pg_gamma": self.pg_gamma,
            "de": {
                "pop_size": self.de.pop_size,
                "crossover": self.de.crossover,
                "weight": self.de.weight,
                "generations": self.de.generations,
            },
            "include_fung": self.include_fung,
            "fung_first_cycle_only": self.fung_first_cycle_only,
            "n_field_dumps": self.n_field_dumps,
        }


@dataclass
class StudyReport:
    """JSON-serializable study outcome plus non-serialized artifacts."""

    study_id: int
    seed: int
    config: dict
    dataset_meta: dict
    models: dict[str, dict]
    per_sample: list[dict]
    timing: dict[str, float] = field(default_factory=dict)

    # artifacts carried for emission, not part of the summary dict
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    fung_result: DeResult | None = None
    field_dump_data: dict = field(default_factory=dict)
    trained_params: dict[str, IfnoParams] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "study_id": self.study_id,
            "seed": self.seed,
            "config": self.config,
            "dataset_meta": self.dataset_meta,
            "models": self.models,
            "per_sample": self.per_sample,
            "timing": self.timing,
        }

    @staticmethod
    def from_dict(d: dict) -> "StudyReport":
        return StudyReport(
            study_id=d["study_id"],
            seed=d["seed"],
            config=d["config"],
            dataset_meta=d["dataset_meta"],
            models=d["models"],
            per_sample=d["per_sample"],
            timing=d.get("timing", {}),
        )


def _predict_fields(params: IfnoParams, samples: list[Sample]) -> np.ndarray:
    feats, _, _ = prepare_arrays(samples)
    out_x, _ = subnet_forward(feats, params.sub_x, params.depth, params.dt, params.activation)
    out_y, _ = subnet_forward(feats, params.sub_y, params.depth, params.dt, params.activation)
    return np.stack([out_x, out_y], axis=-1)


def _error_rows(
    model: str,
    ds: Dataset,
    indices: np.ndarray,
    preds: np.ndarray,
    split: str,
    converged: list[bool] | None = None,
) -> list[dict]:
    spec = ds.grid
    floor = relative_error_floor(spec)
    rows = []
    for pos, idx in enumerate(indices):
        s = ds.samples[idx]
        den = math.sqrt(l2_norm_sq(s.field.values, spec))
        num = math.sqrt(l2_norm_sq(preds[pos] - s.field.values, spec))
        defined = den >= floor
        rows.append(
            {
                "model": model,
                "sample": int(idx),
                "protocol_id": s.protocol_id,
                "frame_index": s.frame_index,
                "cycle_index": s.cycle_index,
                "split": split,
                "abs_error": num,
                "truth_norm": den,
                "error": (num / den) if defined else None,
                "converged": True if converged is None else bool(converged[pos]),
            }
        )
    return rows


def summarize_rows(rows: list[dict]) -> dict:
    """Per-split mean/pooled errors recomputed from the per-sample table."""
    out = {}
    for split in ("train", "test"):
        for tag, keep in (("", lambda r: True), ("first_cycle_", lambda r: r["cycle_index"] == 0)):
            sel = [r for r in rows if r["split"] == split and keep(r)]
            defined = [r for r in sel if r["error"] is not None]
            num_sq = sum(r["abs_error"] ** 2 for r in defined)
            den_sq = sum(r["truth_norm"] ** 2 for r in defined)
            out[f"{tag}{split}_mean_error"] = (
                sum(r["error"] for r in defined) / len(defined) if defined else None
            )
            out[f"{tag}{split}_pooled_error"] = (
                math.sqrt(num_sq / den_sq) if den_sq > 0 else None
            )
            out[f"{tag}{split}_n"] = len(sel)
            out[f"{tag}{split}_n_excluded_zero"] = len(sel) - len(defined)
            out[f"{tag}{split}_n_not_converged"] = sum(
                1 for r in sel if not r.get("converged", True)
            )
    return out


def run_study(study_id: int, ds: Dataset, config: StudyConfig) -> StudyReport:
    """Execute one study scenario end to end."""
    t_start = time.perf_counter()
    timing: dict[str, float] = {}
    train_idx, test_idx = split_study(ds, study_id, config.train.seed)
    train_samples = [ds.samples[i] for i in train_idx]
    test_samples = [ds.samples[i] for i in test_idx]

    models: dict[str, dict] = {}
    per_sample: list[dict] = []
    histories: dict[str, TrainHistory] = {}
    trained: dict[str, IfnoParams] = {}
    dump_data: dict = {}

    dump_idx: list[int] = []
    for name, gamma in ((MODEL_VANILLA, 0.0), (MODEL_PG, config.pg_gamma)):
        t0 = time.perf_counter()
        tc = replace(config.train, gamma=gamma)
        params, history = train(train_samples, config.model, tc)
        timing[f"{name}_train_s"] = time.perf_counter() - t0
        histories[name] = history
        trained[name] = params
        rows = []
        rows += _error_rows(name, ds, train_idx, _predict_fields(params, train_samples), "train")
        test_preds = _predict_fields(params, test_samples)
        rows += _error_rows(name, ds, test_idx, test_preds, "test")
        per_sample += rows
        models[name] = summarize_rows(rows)
        if name == MODEL_VANILLA:
            dump_idx = _select_dump_samples(rows, config)
            for idx in dump_idx:
                dump_data[("__truth__", int(idx))] = ds.samples[idx].field.values
        for idx in dump_idx:
            pos = np.flatnonzero(test_idx == idx)
            if pos.size:
                dump_data[(name, int(idx))] = test_preds[pos[0]].copy()

    fung_result = None
    if config.include_fung and ds.stress_records:
        t0 = time.perf_counter()
        fung_result, fung_rows, fung_preds = _run_fung_baseline(ds, train_idx, test_idx, config)
        per_sample += fung_rows
        models[MODEL_FUNG] = summarize_rows(fung_rows)
        timing["fung_s"] = time.perf_counter() - t0
        for idx in dump_idx:
            if idx in fung_preds:
                dump_data[(MODEL_FUNG, int(idx))] = fung_preds[idx]

    timing["total_s"] = time.perf_counter() - t_start
    report = StudyReport(
        study_id=study_id,
        seed=config.train.seed,
        config=config.echo(),
        dataset_meta={
            "n_samples": len(ds.samples),
            "grid": {"nx": ds.grid.nx, "ny": ds.grid.ny, "extent": list(ds.grid.extent)},
            "dataset_seed": ds.seed,
            "noise_std": ds.noise_std,
            "n_train": int(len(train_idx)),
            "n_test": int(len(test_idx)),
        },
        models=models,
        per_sample=per_sample,
        timing=timing,
        histories=histories,
        fung_result=fung_result,
        field_dump_data=dump_data,
        trained_params=trained,
    )
    return report


def _select_dump_samples(vanilla_rows: list[dict], config: StudyConfig) -> list[int]:
    if config.field_dump_samples is not None:
        return list(config.field_dump_samples)
    test_defined = [r for r in vanilla_rows if r["split"] == "test" and r["error"] is not None]
    if not test_defined:
        return []
    ranked = sorted(test_defined, key=lambda r: r["error"])
    picks = [ranked[-1]]  # worst
    if len(ranked) > 1:
        picks.append(ranked[len(ranked) // 2])  # median
    return [r["sample"] for r in picks[: config.n_field_dumps]]


def _run_fung_baseline(ds: Dataset, train_idx, test_idx, config: StudyConfig):
    train_keys = {(ds.samples[i].protocol_id, ds.samples[i].frame_index) for i in train_idx}
    records = [
        r
        for r in ds.stress_records
        if (r.protocol_id, r.frame_index) in train_keys
    ]
    if config.fung_first_cycle_only:
        first_cycle_keys = {
            (s.protocol_id, s.frame_index)
            for s in ds.samples
            if s.cycle_index == 0
        }
        records = [r for r in records if (r.protocol_id, r.frame_index) in first_cycle_keys]
    if len(records) < 4:
        raise ConfigError(
            f"only {len(records)} stress records available for the baseline fit"
        )
    result = fit_fung_de(records, bounds=config.fung_bounds, config=config.de,
                         seed=config.train.seed)

    rows = []
    preds_by_sample: dict[int, np.ndarray] = {}
    for split, indices in (("train", train_idx), ("test", test_idx)):
        sel = [
            int(i)
            for i in indices
            if not config.fung_first_cycle_only or ds.samples[i].cycle_index == 0
        ]
        # warm-started sweep in frame order within each protocol
        sel.sort(key=lambda i: (ds.samples[i].protocol_id, ds.samples[i].frame_index))
        by_protocol: dict[int, list[int]] = {}
        for i in sel:
            by_protocol.setdefault(ds.samples[i].protocol_id, []).append(i)
        for pid, idx_list in sorted(by_protocol.items()):
            bounds = [ds.samples[i].boundary for i in idx_list]
            results = fem_predict_sequence(bounds, result.params)
            preds = np.stack([r.field.values for r in results])
            converged = [r.converged for r in results]
            rows += _error_rows(MODEL_FUNG, ds, np.array(idx_list), preds, split, converged)
            for pos, i in enumerate(idx_list):
                preds_by_sample[i] = preds[pos]
    return result, rows, preds_by_sample


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def check_report_consistency(report: StudyReport, tol: float = 1e-12) -> None:
    """Verify summary numbers equal statistics recomputed from the table."""
    for model, summary in report.models.items():
        rows = [r for r in report.per_sample if r["model"] == model]
        seen = {(r["sample"], r["split"]) for r in rows}
        if len(seen) != len(rows):
            raise AssertionError(f"duplicate per-sample rows for model {model}")
        recomputed = summarize_rows(rows)
        for key, val in recomputed.items():
            have = summary[key]
            if val is None or have is None:
                if val is not have:
                    raise AssertionError(f"{model}.{key}: {have} != {val}")
            elif abs(val - have) > tol * max(1.0, abs(val)):
                raise AssertionError(f"{model}.{key}: {have} != {val}")


def emit_report(report: StudyReport, out_dir) -> list[str]:
    """Write the report artifacts; returns the created file paths."""
    os.makedirs(out_dir, exist_ok=True)
    check_report_consistency(report)
    written = []

    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    written.append(summary_path)

    table_path = os.path.join(out_dir, "per_sample_errors.csv")
    with open(table_path, "w") as fh:
        fh.write(
            "model,sample,protocol_id,frame_index,cycle_index,split,"
            "error,abs_error,truth_norm,converged\n"
        )
        for r in report.per_sample:
            err = "" if r["error"] is None else repr(r["error"])
            fh.write(
                f"{r['model']},{r['sample']},{r['protocol_id']},{r['frame_index']},"
                f"{r['cycle_index']},{r['split']},{err},{r['abs_error']!r},"
                f"{r['truth_norm']!r},{int(r.get('converged', True))}\n"
            )
    written.append(table_path)

    if report.histories:
        hist_path = os.path.join(out_dir, "loss_history.csv")
        with open(hist_path, "w") as fh:
            fh.write("model,epoch,depth,lr,data_loss,physics_loss,seconds\n")
            for name, h in report.histories.items():
                for row in zip(h.epoch, h.depth, h.lr, h.data_loss, h.physics_loss, h.seconds):
                    fh.write(name + "," + ",".join(repr(v) for v in row) + "\n")
        written.append(hist_path)

    if report.fung_result is not None:
        fung_path = os.path.join(out_dir, "fung_params.json")
        fr = report.fung_result
        with open(fung_path, "w") as fh:
            json.dump(
                {
                    "c": fr.params.c, "a1": fr.params.a1, "a2": fr.params.a2, "a3": fr.params.a3,
                    "lx": fr.params.lx, "ly": fr.params.ly, "lz": fr.params.lz,
                    "objective_mse": fr.objective,
                    "seed": fr.seed,
                    "bounds": {k: list(v) for k, v in fr.bounds.items()},
                    "n_evaluations": fr.n_evaluations,
                },
                fh, sort_keys=True, indent=1,
            )
            fh.write("\n")
        written.append(fung_path)

    if report.field_dump_data:
        fields_dir = os.path.join(out_dir, "fields")
        os.makedirs(fields_dir, exist_ok=True)
        # group dumps by sample; columns per model
        by_sample: dict[int, dict[str, np.ndarray]] = {}
        for (model, idx), pred in report.field_dump_data.items():
            by_sample.setdefault(idx, {})[model] = pred
        g = report.dataset_meta["grid"]
        spec = GridSpec(g["nx"], g["ny"], tuple(g["extent"]))
        coords = node_coordinates(spec)
        for idx, model_preds in sorted(by_sample.items()):
            truth = model_preds.pop("__truth__", None)
            path = os.path.join(fields_dir, f"sample_{idx:05d}.csv")
            names = sorted(model_preds)
            with open(path, "w") as fh:
                header = "x,y,ux_true,uy_true"
                for m in names:
                    header += f",ux_pred_{m},uy_pred_{m}"
                fh.write(header + "\n")
                for i in range(spec.nx):
                    for j in range(spec.ny):
                        tr = truth[i, j] if truth is not None else (float("nan"), float("nan"))
                        line = (
                            f"{float(coords[i, j, 0])!r},{float(coords[i, j, 1])!r},"
                            f"{float(tr[0])!r},{float(tr[1])!r}"
                        )
                        for m in names:
                            line += (
                                f",{float(model_preds[m][i, j, 0])!r}"
                                f",{float(model_preds[m][i, j, 1])!r}"
                            )
                        fh.write(line + "\n")
            written.append(path)
    return written
