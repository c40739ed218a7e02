"""Experiment stages behind the command line: generate, train, eval, reproduce.

Seeds: every stage derives its own seed from the root seed as the first eight
bytes (big endian) of ``sha256("<root>/<label>/<label>...")``, see ``sub_seed``.

Output layout under ``out``::

    manifest.json
    data/q2_<level>/{train,val,test}.json
    data/linearization_<regime>.json
    models/<regime>/q2_<level>/{checkpoint.json,train_log.csv}
    results/results_<regime>.csv, results/runtimes_<regime>.csv
    results/table_<regime>.csv, results/trajectory_<regime>_q2_<level>.csv
    results/summary.csv, results/summary.txt (reproduce only)

Result CSVs hold only seed-determined values; wall-clock times go to the
separate runtimes files so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import filters, train
from .atkf import run_batch
from .batch import build_pretrain_data
from .ltpwl import linearize_system
from .nn import AttentionNetParams, init_params
from .system import PARA_M, PARA_S, Dataset, generate_dataset, noise_free_trajectory, synthetic_model

log = logging.getLogger(__name__)

REGIMES = ("noise", "mismatch")
FILTERS = ("EKF", "UKF", "PF", "AtKF")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def sub_seed(root: int, *labels) -> int:
    key = "/".join([str(root)] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")


def level_tag(level: float) -> str:
    return f"{level:g}"


@dataclass
class ExperimentConfig:
    regime: str = "noise"
    noise_levels: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])
    n_train: int = 1000
    l_train: int = 10
    n_val: int = 100
    l_val: int = 10
    n_test: int = 200
    l_test: int = 100
    l_linearization: int = 10
    x0: list = field(default_factory=lambda: [0.1, 0.1])
    prior_var: float = 1.0
    roster: list = field(default_factory=lambda: list(FILTERS))
    particles: int = 100
    ukf: dict = field(default_factory=lambda: asdict(filters.UKFConfig.benchmark()))
    feature_transform: str = "l2"
    skip_pretrain: bool = False
    train: train.TrainConfig = field(default_factory=train.TrainConfig)
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = train.TrainConfig(**self.train)
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if not self.noise_levels or any(q <= 0 for q in self.noise_levels):
            raise ValueError("noise levels must be positive")
        unknown = set(self.roster) - set(FILTERS)
        if not self.roster or unknown:
            raise ValueError(f"roster must be a non-empty subset of {FILTERS}")
        self.noise_levels = [float(q) for q in self.noise_levels]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls(**json.loads(Path(path).read_text()))

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def filter_params(self, regime: str | None = None):
        return PARA_S if (regime or self.regime) == "noise" else PARA_M


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise StageError("io", f"cannot write {path}: {exc}") from exc
    return path


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise StageError("io", f"cannot read {path}: {exc}") from exc


def data_path(cfg: ExperimentConfig, level: float, split: str) -> Path:
    return cfg.out_dir / "data" / f"q2_{level_tag(level)}" / f"{split}.json"


def model_dir(cfg: ExperimentConfig, regime: str, level: float) -> Path:
    return cfg.out_dir / "models" / regime / f"q2_{level_tag(level)}"


def _update_manifest(cfg: ExperimentConfig, section: str, entry: dict) -> None:
    path = cfg.out_dir / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc["config"] = cfg.to_dict()
    doc.setdefault(section, {}).update(entry)
    _write(path, json.dumps(doc, indent=2, sort_keys=True))


def cmd_generate(cfg: ExperimentConfig) -> dict:
    """Train/val/test datasets per noise level plus the noise-free linearization trajectories."""
    files = {}
    sizes = {"train": (cfg.n_train, cfg.l_train), "val": (cfg.n_val, cfg.l_val), "test": (cfg.n_test, cfg.l_test)}
    for level in cfg.noise_levels:
        true = synthetic_model(PARA_S, level, level)
        for split, (N, L) in sizes.items():
            seed = sub_seed(cfg.seed, "data", level_tag(level), split)
            ds = generate_dataset(true, cfg.x0, N, L, seed)
            p = _write(data_path(cfg, level, split), ds.to_json())
            files[str(p.relative_to(cfg.out_dir))] = {"seed": seed, "sha256": _sha256(p)}
    for regime in REGIMES:
        fm = synthetic_model(cfg.filter_params(regime))
        traj = noise_free_trajectory(fm, cfg.x0, cfg.l_linearization)
        p = _write(cfg.out_dir / "data" / f"linearization_{regime}.json", json.dumps({"x": traj.tolist()}))
        files[str(p.relative_to(cfg.out_dir))] = {"seed": None, "sha256": _sha256(p)}
    _update_manifest(cfg, "files", files)
    return files


def load_dataset(cfg: ExperimentConfig, level: float, split: str) -> Dataset:
    path = data_path(cfg, level, split)
    if not path.exists():
        raise StageError("data", f"missing dataset {path}; run `generate` first")
    return Dataset.from_json(_read(path))


def train_one(cfg: ExperimentConfig, regime: str, level: float, train_ds: Dataset, val_ds: Dataset):
    """Pre-train (unless skipped) then train end-to-end; returns (params, log rows)."""
    fm = synthetic_model(cfg.filter_params(regime), level, level)
    x0 = np.asarray(cfg.x0)
    tcfg = train.TrainConfig(**{**cfg.train.to_dict(), "seed": sub_seed(cfg.seed, "train", regime, level_tag(level))})
    if cfg.skip_pretrain:
        tcfg.pretrain_epochs = 0
    params = init_params(fm.state_dim, fm.obs_dim, tcfg.window, tcfg.d_model, tcfg.d_ff,
                         seed=sub_seed(cfg.seed, "init", regime, level_tag(level)),
                         feature_transform=cfg.feature_transform)
    rows: list[train.LogRow] = []

    def val_fn(p):
        return train.evaluate(p, val_ds, fm, x0)

    if tcfg.pretrain_epochs > 0:
        lin = linearize_system(fm, noise_free_trajectory(fm, x0, cfg.l_linearization))
        data = build_pretrain_data(train_ds, lin, fm, tcfg.window, x0, cfg.prior_var * np.eye(fm.state_dim))
        params = train.pretrain(params, data, tcfg, val_fn, rows)
    params = train.train_e2e(params, train_ds, fm, tcfg, x0, val_fn, rows)
    return params, [r for r in rows if r.epoch > 0]


def cmd_train(cfg: ExperimentConfig, regime: str | None = None) -> dict:
    regime = regime or cfg.regime
    out = {}
    for level in cfg.noise_levels:
        tr, va = load_dataset(cfg, level, "train"), load_dataset(cfg, level, "val")
        try:
            params, rows = train_one(cfg, regime, level, tr, va)
        except FloatingPointError as exc:
            raise StageError("train", str(exc)) from exc
        d = model_dir(cfg, regime, level)
        ck = _write(d / "checkpoint.json", params.to_json())
        lines = ["phase,epoch,mean_loss,val_mse,wall_seconds"]
        lines += [f"{r.phase},{r.epoch},{r.mean_loss!r},{r.val_mse!r},{r.wall_seconds:.3f}" for r in rows]
        _write(d / "train_log.csv", "\n".join(lines) + "\n")
        out[str(ck.relative_to(cfg.out_dir))] = {"sha256": _sha256(ck), "epochs": len(rows)}
    _update_manifest(cfg, "checkpoints", out)
    return out


def run_filter(name: str, cfg: ExperimentConfig, regime: str, level: float, test: Dataset,
               params: AttentionNetParams | None = None) -> np.ndarray:
    """Estimates (N, L, m) of one filter on every test trajectory."""
    fm = synthetic_model(cfg.filter_params(regime), level, level)
    x0 = np.asarray(cfg.x0)
    init = filters.GaussianBelief(x0, cfg.prior_var * np.eye(fm.state_dim))
    obs = test.observations
    if name == "EKF":
        return np.stack([filters.ekf_run(fm, y, init) for y in obs])
    if name == "UKF":
        ucfg = filters.UKFConfig(**cfg.ukf)
        return np.stack([filters.ukf_run(fm, y, init, ucfg) for y in obs])
    if name == "PF":
        base = sub_seed(cfg.seed, "pf", regime, level_tag(level))
        return np.stack([filters.pf_run(fm, y, init, cfg.particles, np.random.default_rng([base, i]))
                         for i, y in enumerate(obs)])
    if name == "AtKF":
        if params is None:
            raise StageError("eval", "AtKF needs a trained checkpoint")
        return run_batch(fm, params, obs, x0)
    raise ValueError(f"unknown filter {name!r}")


def load_checkpoint(cfg: ExperimentConfig, regime: str, level: float) -> AttentionNetParams:
    path = model_dir(cfg, regime, level) / "checkpoint.json"
    if not path.exists():
        raise StageError("eval", f"missing checkpoint {path}; run `train` first")
    return AttentionNetParams.from_json(_read(path))


def cmd_eval(cfg: ExperimentConfig, regime: str | None = None, trajectory_dump: int | None = None) -> list[dict]:
    """MSE of every roster filter at every level; writes results and runtimes CSVs."""
    regime = regime or cfg.regime
    rows, times = [], []
    for level in cfg.noise_levels:
        test = load_dataset(cfg, level, "test")
        params = load_checkpoint(cfg, regime, level) if "AtKF" in cfg.roster else None
        estimates = {}
        for name in cfg.roster:
            t0 = time.perf_counter()
            est = run_filter(name, cfg, regime, level, test, params)
            elapsed = time.perf_counter() - t0
            estimates[name] = est
            value = float(np.mean((est - test.states) ** 2))
            rows.append({"filter": name, "regime": regime, "q2": level, "mse": value})
            times.append({"filter": name, "regime": regime, "q2": level, "runtime_seconds": elapsed})
            log.info("%s %s q2=%g mse=%.4f (%.1fs)", regime, name, level, value, elapsed)
        if trajectory_dump is not None:
            _dump_trajectory(cfg, regime, level, test, estimates, trajectory_dump)
    res = cfg.out_dir / "results"
    _write(res / f"results_{regime}.csv", _csv(rows, ["filter", "regime", "q2", "mse"]))
    _write(res / f"runtimes_{regime}.csv", _csv(times, ["filter", "regime", "q2", "runtime_seconds"]))
    _write(res / f"table_{regime}.csv", format_table(rows, cfg.roster, cfg.noise_levels))
    return rows


def _csv(rows: list[dict], cols: list[str]) -> str:
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def format_table(rows: list[dict], roster, levels) -> str:
    lookup = {(r["filter"], r["q2"]): r["mse"] for r in rows}
    lines = ["filter," + ",".join(level_tag(q) for q in levels)]
    for name in roster:
        lines.append(name + "," + ",".join(f"{lookup[(name, q)]:.4f}" for q in levels))
    return "\n".join(lines) + "\n"


def _dump_trajectory(cfg, regime, level, test: Dataset, estimates: dict, index: int) -> None:
    if not 0 <= index < len(test):
        raise StageError("eval", f"trajectory index {index} out of range 0..{len(test) - 1}")
    truth = test.states[index]
    m = truth.shape[1]
    cols = ["step"] + [f"true_x{i + 1}" for i in range(m)]
    for name in estimates:
        cols += [f"{name}_x{i + 1}" for i in range(m)]
    lines = [",".join(cols)]
    for k in range(len(truth)):
        vals = [str(k + 1)] + [repr(float(v)) for v in truth[k]]
        for est in estimates.values():
            vals += [repr(float(v)) for v in est[index, k]]
        lines.append(",".join(vals))
    _write(cfg.out_dir / "results" / f"trajectory_{regime}_q2_{level_tag(level)}.csv", "\n".join(lines) + "\n")


def cmd_reproduce(cfg: ExperimentConfig, trajectory_dump: int | None = None) -> str:
    """generate -> train -> eval for both regimes; returns the printed summary."""
    stages = [("generate", lambda: cmd_generate(cfg))]
    results = {}
    for regime in REGIMES:
        stages.append((f"train:{regime}", lambda r=regime: cmd_train(cfg, r)))
        stages.append((f"eval:{regime}", lambda r=regime: results.__setitem__(r, cmd_eval(cfg, r, trajectory_dump))))
    for name, fn in stages:
        log.info("stage %s", name)
        try:
            fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    combined = [r for regime in REGIMES for r in results[regime]]
    _write(cfg.out_dir / "results" / "summary.csv", _csv(combined, ["filter", "regime", "q2", "mse"]))
    summary = []
    for regime in REGIMES:
        summary.append(f"{regime} study (MSE)")
        summary.append(format_table(results[regime], cfg.roster, cfg.noise_levels))
    text = "\n".join(summary)
    _write(cfg.out_dir / "results" / "summary.txt", text)
    return text
