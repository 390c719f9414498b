"""Experiment orchestration behind the command line.

Every run writes deterministic CSVs (no wall-clock columns) next to separate
``*_timing.csv`` files, plus a ``report.json`` carrying the config hash.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .datasets import GENERATORS
from .errors import ConfigError, DataError
from .imaging import DatasetSource, ImageDataset, load_dataset, nmse, psnr, read_image, save_png
from .meta import MetaConfig, meta_train, save_checkpoint
from .methods import MethodRunner, MethodSpec, Problem, ProblemSpec, make_problem
from .networks import DipNetConfig, SirenConfig
from .operators import Measurement, MeasurementOperator
from .pnp import ADMMConfig, TABLE_COLUMNS, ValidationTask, get_denoiser, grid_search

logger = logging.getLogger(__name__)

RAW_COLUMNS = ("method", "problem", "task_id", "seed", "psnr", "status")
SUMMARY_COLUMNS = ("method", "problem", "tasks", "mean_psnr", "std_psnr")
CURVE_COLUMNS = ("method", "step", "nmse")
TRAINING_COLUMNS = ("step", "outer_loss", "grad_norm", "val_loss", "val_psnr", "skipped")


def derive_seed(master: int, *parts) -> int:
    """Independent 63-bit seed for ``(master, *parts)``; parts may be strings."""
    words = [int(master)]
    for p in parts:
        words.extend(p.encode() if isinstance(p, str) else [int(p)])
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def environment_record() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "torch_threads": torch.get_num_threads(),
    }


# ---------------------------------------------------------------------------
# Config -> objects


def dataset_from_config(cfg: Config) -> ImageDataset:
    d = cfg["data"]
    if d["source"] == "directory":
        if not d["root"]:
            raise ConfigError("[data] root is required when source = directory")
        if not Path(d["root"]).is_dir():
            raise ConfigError(f"[data] root {d['root']!r} is not a directory")
        return load_dataset(DatasetSource(d["root"], d["crop"], d["size"], d["seed"], channels=d["channels"]))
    if d["count"] < 1:
        raise ConfigError("[data] count must be >= 1")
    ds = GENERATORS[d["source"]](d["count"], d["size"], d["seed"])
    if d["channels"] == 1:
        ds.images = [img.mean(axis=2, keepdims=True) for img in ds.images]
    return ds


def net_config_from_config(cfg: Config, channels: int = 3):
    n = cfg["network"]
    if n["kind"] == "siren":
        return SirenConfig(n["siren_layers"], n["siren_width"], n["siren_omega0"], channels, n["fourier_features"], n["fourier_scale"])
    return DipNetConfig(
        latent_channels=n["latent_channels"],
        num_fourier_features=n["fourier_features"],
        fourier_scale=n["fourier_scale"],
        channels=n["channels"],
        skip_channels=n["skip_channels"],
        out_channels=channels,
    )


def meta_config_from_config(cfg: Config) -> MetaConfig:
    m = cfg["meta"]
    return MetaConfig(
        outer_steps=m["outer_steps"],
        inner_steps=m["inner_steps"],
        test_steps=m["test_steps"],
        batch_size=m["batch_size"],
        sigma_8bit=m["sigma"],
        outer_lr=m["outer_lr"],
        lr_outer_lr=m["lr_outer_lr"],
        init_lr=m["init_lr"],
        momentum=m["momentum"],
        learn_lrs=m["learn_lrs"],
        first_order=m["first_order"],
        seed=cfg["run"]["seed"],
        eval_every=m["eval_every"],
        val_tasks=m["val_tasks"],
        checkpoint_every=m["checkpoint_every"],
    )


def problem_from_config(cfg: Config, kind: str | None = None) -> ProblemSpec:
    p = cfg["problem"]
    return ProblemSpec(kind or p["kind"], p["sigma"], p["ratio"])


def admm_from_config(cfg: Config) -> ADMMConfig:
    a = cfg["admm"]
    return ADMMConfig(rho=a["rho"], strength=a["strength"], iterations=a["iterations"])


def method_spec(cfg: Config, name: str) -> MethodSpec:
    m = cfg["methods"]
    ckpt = None
    if name == "metadip":
        ckpt = m["checkpoint"] or None
        if ckpt is None:
            raise ConfigError("[methods] checkpoint is required for metadip")
    elif name == "metasiren":
        ckpt = m["siren_checkpoint"] or None
        if ckpt is None:
            raise ConfigError("[methods] siren_checkpoint is required for metasiren")
    if ckpt is not None and not Path(ckpt).is_file():
        raise ConfigError(f"checkpoint {ckpt!r} for {name} does not exist")
    if name.startswith("pnp-admm+"):
        get_denoiser(name[len("pnp-admm+") :])
    try:
        return MethodSpec(name, ckpt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def make_runner(cfg: Config, name: str, channels: int = 3) -> MethodRunner:
    return MethodRunner(method_spec(cfg, name), net_config_from_config(cfg, channels), cfg["run"]["seed"], admm_from_config(cfg))


def task_problem(cfg: Config, dataset, spec: ProblemSpec, task: int) -> Problem:
    master = cfg["run"]["seed"]
    return make_problem(
        dataset[task],
        spec,
        operator_seed=derive_seed(master, "operator", spec.label(), task),
        noise_seed=derive_seed(master, "noise", spec.label(), task),
    )


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_report(out_dir: Path, cfg: Config, kind: str, extra: dict | None = None) -> Path:
    report = {
        "kind": kind,
        "config_hash": cfg.hash(),
        "config": cfg.canonical_text(),
        "seed": cfg["run"]["seed"],
        "environment": environment_record(),
        **(extra or {}),
    }
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path


def verify_report(report_path, cfg: Config) -> bool:
    """True iff the report was produced from exactly this configuration."""
    report = json.loads(Path(report_path).read_text())
    return report.get("config_hash") == cfg.hash() and report.get("config") == cfg.canonical_text()


# ---------------------------------------------------------------------------
# Commands


def run_meta_train(cfg: Config, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset_from_config(cfg)
    net_config = net_config_from_config(cfg, dataset.shape[2])
    mcfg = meta_config_from_config(cfg)
    if isinstance(net_config, SirenConfig):
        # learned step sizes destabilize SIREN meta-training
        from dataclasses import replace

        mcfg = replace(mcfg, learn_lrs=False)
    history: list[dict] = []
    init = meta_train(dataset, mcfg, net_config, checkpoint_dir=out_dir / "checkpoints", history=history)
    init.provenance["config_hash"] = cfg.hash()
    ckpt = save_checkpoint(init, out_dir / f"meta{net_config.kind}.ckpt")
    _write_csv(
        out_dir / "training_curve.csv",
        TRAINING_COLUMNS,
        [{**{k: r.get(k, "") for k in TRAINING_COLUMNS}, "skipped": int(bool(r.get("skipped", False)))} for r in history],
    )
    _write_report(out_dir, cfg, "meta-train", {"checkpoint": ckpt.name, "best_val_psnr": init.provenance.get("best_val_psnr")})
    return ckpt


@dataclass
class SolveOutcome:
    image: np.ndarray
    psnr: float | None
    trace_path: Path
    image_path: Path


def run_solve(
    cfg: Config,
    out_dir,
    method: str,
    problem: ProblemSpec,
    input_path=None,
    measurement_path=None,
    steps: int | None = None,
) -> SolveOutcome:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = cfg["run"]["seed"]
    if measurement_path is not None:
        with np.load(measurement_path) as data:
            op = MeasurementOperator.from_bytes(data["operator"].tobytes())
            shape = tuple(int(s) for s in data["shape"])
            y = Measurement(np.asarray(data["y"], dtype=np.float64), op)
            truth = np.asarray(data["truth"]) if "truth" in data.files else None
        prob = Problem(op, y, truth, shape, ProblemSpec(op.kind, op.sigma_8bit, op.ratio))
    else:
        if input_path is not None:
            image = read_image(input_path, cfg["data"]["channels"])
        else:
            image = dataset_from_config(cfg)[0]
        prob = make_problem(image, problem, derive_seed(master, "operator", 0), derive_seed(master, "noise", 0))
        np.savez(
            out_dir / "measurement.npz",
            operator=np.frombuffer(prob.op.to_bytes(), dtype=np.uint8),
            y=prob.y.values,
            shape=np.asarray(prob.shape),
            truth=prob.truth,
        )
    runner = make_runner(cfg, method, prob.shape[2])
    steps = steps or cfg["methods"]["steps"] or None
    out = runner.solve(prob, steps=steps)
    image_path = out_dir / "reconstruction.png"
    save_png(image_path, out.image)
    score = psnr(prob.truth, out.image) if prob.truth is not None else None
    header = {
        "method": method,
        "kind": prob.op.kind,
        "n": prob.op.n,
        "m": prob.op.m,
        "sigma": prob.op.sigma_8bit,
        "ratio": f"{prob.op.ratio:.6g}",
        "config_hash": cfg.hash(),
        "psnr": repr(score) if score is not None else "",
    }
    trace_path = out_dir / "trace.csv"
    if out.fit is not None:
        out.fit.to_csv(trace_path, header)
        out.fit.timing_to_csv(out_dir / "trace_timing.csv")
    else:
        with open(trace_path, "w", newline="") as fh:
            for k, v in header.items():
                fh.write(f"# {k}={v}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "residual"])
            for i, r in enumerate(out.residuals, 1):
                writer.writerow([i, repr(r)])
        (out_dir / "trace_timing.csv").write_text(f"total_seconds\n{out.seconds:.6f}\n")
    _write_report(out_dir, cfg, "solve", {"method": method, "psnr": score})
    return SolveOutcome(out.image, score, trace_path, image_path)


@dataclass
class BenchmarkReport:
    rows: list[dict]
    timings: list[dict]
    summary: list[dict]
    config_hash: str
    environment: dict = field(default_factory=dict)

    def table(self) -> str:
        lines = [f"config {self.config_hash[:12]}", f"{'method':<20}{'problem':<12}{'PSNR (dB)':>18}{'seconds':>12}"]
        for s in self.summary:
            secs = [t["seconds"] for t in self.timings if t["method"] == s["method"] and t["problem"] == s["problem"]]
            lines.append(
                f"{s['method']:<20}{s['problem']:<12}{s['mean_psnr']:>10.2f} +/- {s['std_psnr']:<5.2f}{np.mean(secs) if secs else float('nan'):>12.3f}"
            )
        return "\n".join(lines)


def run_benchmark(cfg: Config, out_dir) -> BenchmarkReport:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset_from_config(cfg)
    n_tasks = cfg["benchmark"]["tasks"]
    if n_tasks < 1 or not cfg["methods"]["names"] or not cfg["benchmark"]["problems"]:
        raise ConfigError("benchmark needs at least one method, one problem and one task")
    if n_tasks > len(dataset):
        raise DataError(f"benchmark asks for {n_tasks} tasks but the dataset holds {len(dataset)} images")
    runners = {name: make_runner(cfg, name, dataset.shape[2]) for name in cfg["methods"]["names"]}
    steps = cfg["methods"]["steps"] or None
    jobs = []
    for kind in cfg["benchmark"]["problems"]:
        spec = problem_from_config(cfg, kind)
        for task in range(n_tasks):
            for name in runners:
                jobs.append((name, spec, task))

    def run(job):
        name, spec, task = job
        row = {"method": name, "problem": spec.label(), "task_id": task, "seed": cfg["run"]["seed"], "psnr": float("nan")}
        seconds = float("nan")
        try:
            prob = task_problem(cfg, dataset, spec, task)
            out = runners[name].solve(prob, steps=None if runners[name].spec.dip_steps else steps)
            row["psnr"] = psnr(prob.truth, out.image)
            row["status"] = "ok"
            seconds = out.seconds
        except Exception as exc:  # recorded, never dropped
            logger.exception("task %s failed", job)
            row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
        return row, {"method": name, "problem": spec.label(), "task_id": task, "seconds": seconds}

    workers = max(1, cfg["run"]["workers"])
    if workers == 1:
        results = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    rows = [r for r, _ in results]
    timings = [t for _, t in results]
    summary = []
    for name in runners:
        for kind in cfg["benchmark"]["problems"]:
            label = problem_from_config(cfg, kind).label()
            vals = [r["psnr"] for r in rows if r["method"] == name and r["problem"] == label and r["status"] == "ok"]
            summary.append(
                {
                    "method": name,
                    "problem": label,
                    "tasks": len(vals),
                    "mean_psnr": float(np.mean(vals)) if vals else float("nan"),
                    "std_psnr": float(np.std(vals)) if vals else float("nan"),
                }
            )
    report = BenchmarkReport(rows, timings, summary, cfg.hash(), environment_record())
    _write_csv(out_dir / "raw.csv", RAW_COLUMNS, rows)
    _write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summary)
    _write_csv(out_dir / "timing.csv", ("method", "problem", "task_id", "seconds"), timings)
    (out_dir / "table.txt").write_text(report.table() + "\n")
    _write_report(out_dir, cfg, "benchmark")
    return report


def run_gridsearch(cfg: Config, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset_from_config(cfg)
    spec = problem_from_config(cfg)
    a = cfg["admm"]
    if spec.kind == "denoise":
        raise ConfigError("[problem] kind must be cs or cpr for a PnP-ADMM grid search")
    count = min(a["validation_tasks"], len(dataset))
    tasks = []
    for t in range(count):
        prob = task_problem(cfg, dataset, spec, t)
        tasks.append(ValidationTask(prob.op, prob.y, prob.truth, str(t)))
    grids = {"strength": a["grid_strength"], "rho": a["grid_rho"], "iterations": a["grid_iterations"]}
    best, table = grid_search(tasks, get_denoiser(a["denoiser"]), grids)
    _write_csv(out_dir / "grid.csv", TABLE_COLUMNS[:-1], table)
    _write_csv(out_dir / "grid_timing.csv", TABLE_COLUMNS, table)
    (out_dir / "best.ini").write_text(
        f"[admm]\ndenoiser = {a['denoiser']}\nstrength = {best.strength!r}\nrho = {best.rho!r}\niterations = {best.iterations}\n"
    )
    _write_report(out_dir, cfg, "gridsearch", {"best": {"strength": best.strength, "rho": best.rho, "iterations": best.iterations}})
    return best, table


def run_convergence(cfg: Config, out_dir) -> dict[str, list[float]]:
    """NMSE-vs-step curves for each configured method on one task."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset_from_config(cfg)
    spec = problem_from_config(cfg)
    max_steps = cfg["convergence"]["max_steps"]
    prob = task_problem(cfg, dataset, spec, cfg["convergence"]["task"])
    curves, seconds = {}, {}
    for name in cfg["methods"]["names"]:
        runner = make_runner(cfg, name, dataset.shape[2])
        if runner.spec.name.startswith("pnp-admm+"):
            raise ConfigError(f"method {name} does not produce per-step traces")
        out = runner.solve(prob, steps=max_steps)
        curves[name] = out.fit.nmse_trace
        seconds[name] = out.fit.cumulative_seconds
    rows = [{"method": name, "step": t, "nmse": v} for name, c in curves.items() for t, v in enumerate(c)]
    _write_csv(out_dir / "curve.csv", CURVE_COLUMNS, rows)
    _write_csv(
        out_dir / "curve_timing.csv",
        ("method", "step", "cumulative_seconds"),
        [{"method": n, "step": t, "cumulative_seconds": s} for n, c in seconds.items() for t, s in enumerate(c)],
    )
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, c in curves.items():
        ax1.semilogy(range(len(c)), c, label=name)
        ax2.semilogy(seconds[name], c, label=name)
    ax1.set_xlabel("iteration")
    ax2.set_xlabel("seconds")
    ax1.set_ylabel("NMSE")
    ax1.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "convergence.png", dpi=100)
    plt.close(fig)
    _write_report(out_dir, cfg, "convergence", {"task": cfg["convergence"]["task"]})
    return curves
