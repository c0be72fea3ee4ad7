"""Training loops: supervised teacher/baseline training and CTKD distillation.

A distillation step does one forward through teacher and student, one
backward through ``alpha_ce * CE + alpha_kd * KD`` and one shared SGD step.
The temperature reaches the loss through a :class:`GrlGate`, so that single
step descends for the student and ascends (scaled by lambda) for the
temperature module.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ExperimentConfig, ModelConfig, OptimizerConfig, dump_config, parse_config
from .curriculum import CurriculumSchedule
from .data import BatchPlan, Dataset, augment, gen_blobs, load_dataset, load_idx, standardize
from .distill import GrlGate, TemperatureModule, cross_entropy, kd_loss, predict_temperature, total_loss
from .models import Model, ModelSpec, build, forward, load_checkpoint, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "ce_loss", "kd_loss", "train_acc", "test_acc",
                  "tau_mean", "tau_min", "tau_max", "lambda", "seconds")


class TrainingError(RuntimeError):
    """A run could not complete (missing inputs, non-finite loss, ...)."""


# -- optimizer ----------------------------------------------------------------------
@dataclass
class OptimizerState:
    """SGD with momentum, L2 weight decay and step learning-rate decay.

    ``milestones`` are epoch indices; from each one on, the rate is divided
    by ``decay`` once more.
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = ()
    decay: float = 10.0
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    base_lr: Optional[float] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.base_lr is None:
            self.base_lr = self.lr

    def set_epoch(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        self.lr = self.base_lr / self.decay ** passed
        return self.lr

    @classmethod
    def from_config(cls, cfg: OptimizerConfig, epochs: int) -> "OptimizerState":
        milestones = tuple(int(round(f * epochs)) for f in cfg.milestones)
        return cls(cfg.lr, cfg.momentum, cfg.weight_decay, milestones, cfg.decay)


def sgd_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
             decay: Optional[Sequence[bool]] = None) -> None:
    """``v <- m v + (g + wd theta)``; ``theta <- theta - lr v``, in place.

    ``decay[i]`` False exempts parameter ``i`` from weight decay. Velocity
    buffers are keyed by position in ``params``.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if state.weight_decay and (decay is None or decay[i]):
            g = g + state.weight_decay * p.data
        v = state.velocity.get(i)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[i] = v
        p.data = p.data - state.lr * v


# -- data ------------------------------------------------------------------------------
def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "blobs":
        train, test = gen_blobs(d.classes, d.per_class, d.dim, d.spread, d.seed,
                                test_per_class=d.test_per_class, center_scale=d.center_scale,
                                clusters_per_class=d.clusters_per_class)
        return standardize(train, test)
    if d.kind == "idx":
        train = load_idx(d.train_images, d.train_labels, d.classes, "train")
        test = load_idx(d.test_images, d.test_labels, d.classes, "test")
        return train, test
    root = Path(d.path)
    return load_dataset(root / "train.npz"), load_dataset(root / "test.npz")


def model_spec(mcfg: ModelConfig, train: Dataset, seed: int) -> ModelSpec:
    if mcfg.arch == "small_cnn":
        if train.image_shape is None or train.image_shape[0] != train.image_shape[1]:
            raise TrainingError("small_cnn needs a square image dataset")
        return ModelSpec.small_cnn(train.image_shape[0], train.num_classes, seed)
    return ModelSpec(mcfg.arch, (train.dim, *mcfg.hidden, train.num_classes), seed)


def derive_seeds(seed: int) -> tuple[int, int, int]:
    """Independent integer seeds for (model init, temperature init, batch order)."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(c.generate_state(1, dtype=np.uint32)[0]) for c in children)


def _batch_features(ds: Dataset, idx: np.ndarray, aug: Optional[tuple], key) -> np.ndarray:
    x = ds.features[idx]
    if aug is not None and ds.image_shape is not None:
        pad, flip = aug
        imgs = augment(x.reshape(len(idx), *ds.image_shape, 1), pad, flip, key)
        x = imgs.reshape(len(idx), -1)
    return x


# -- evaluation ---------------------------------------------------------------------------
def predict(model: Model, features: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(features), batch_size):
            out.append(forward(model, features[start:start + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model: Model, dataset: Dataset) -> float:
    """Fraction of rows whose argmax logit equals the label."""
    if dataset.dim != model.spec.input_dim:
        raise ad.ShapeError(f"model expects width {model.spec.input_dim}, data has {dataset.dim}")
    if len(dataset) == 0:
        return 0.0
    logits = predict(model, dataset.features)
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))


# -- metrics ---------------------------------------------------------------------------------
@dataclass
class MetricsRecord:
    epoch: int
    ce_loss: float
    kd_loss: float
    train_acc: float
    test_acc: float
    tau_mean: float
    tau_min: float
    tau_max: float
    lam: float
    seconds: float

    def row(self) -> list[str]:
        vals = [self.ce_loss, self.kd_loss, self.train_acc, self.test_acc,
                self.tau_mean, self.tau_min, self.tau_max, self.lam, self.seconds]
        return [str(self.epoch), *(repr(float(v)) for v in vals)]


def write_metrics(path, records: Iterable[MetricsRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.row())
    return path


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            missing = [c for c in METRICS_HEADER if c not in (reader.fieldnames or ())]
            col = missing[0] if missing else ",".join(reader.fieldnames or ())
            raise ValueError(f"{path}: metrics schema mismatch at column {col!r}")
        return [{k: float(v) for k, v in row.items()} for row in reader]


@dataclass
class RunResult:
    model: Model
    records: list[MetricsRecord]
    temperature: Optional[TemperatureModule] = None
    out_dir: Optional[Path] = None

    @property
    def final_test_acc(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")


def _write_summary(out: Path, cfg: ExperimentConfig, result: RunResult, kind: str,
                   wallclock: float, extra: dict | None = None) -> None:
    last = result.records[-1] if result.records else None
    summary = {
        "kind": kind,
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "epochs": cfg.teacher.epochs if kind == "teacher" else cfg.epochs,
        "final_train_acc": last.train_acc if last else None,
        "final_test_acc": last.test_acc if last else None,
        "parameter_count": result.model.parameter_count(),
        "wallclock_seconds": wallclock,
        "defaults": {
            "tau_init": cfg.temperature.tau_init if cfg.temperature else None,
            "tau_range": cfg.temperature.tau_range if cfg.temperature else None,
            "lambda_min": cfg.curriculum.lambda_min,
            "lambda_max": cfg.curriculum.lambda_max,
            "e_loops": cfg.curriculum.e_loops,
            "alpha_ce": cfg.loss.alpha_ce,
            "alpha_kd": cfg.loss.alpha_kd,
        },
        **(extra or {}),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# -- supervised training (teacher and no-KD baseline) ---------------------------------------
def train_supervised(spec: ModelSpec, train: Dataset, test: Dataset, epochs: int, batch_size: int,
                     opt_cfg: OptimizerConfig, seed: int, aug: Optional[tuple] = None,
                     record_wallclock: bool = False) -> RunResult:
    """Cross-entropy-only training."""
    if spec.num_classes != train.num_classes:
        raise TrainingError(f"model has {spec.num_classes} classes, data has {train.num_classes}")
    _, _, batch_seed = derive_seeds(seed)
    model = build(spec)
    opt = OptimizerState.from_config(opt_cfg, epochs)
    records = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        opt.set_epoch(epoch)
        ce_sum = correct = 0.0
        plan = BatchPlan(batch_size, batch_seed, epoch)
        for b, idx in enumerate(plan.batches(len(train))):
            x = _batch_features(train, idx, aug, [batch_seed, epoch, b])
            y = train.labels[idx]
            logits = forward(model, x)
            loss = cross_entropy(logits, y)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            model.zero_grad()
            loss.backward()
            sgd_step(opt, model.params, [p.grad for p in model.params])
            ce_sum += loss.item() * len(idx)
            correct += float(np.sum(logits.data.argmax(axis=1) == y))
        seconds = time.perf_counter() - t0 if record_wallclock else 0.0
        records.append(MetricsRecord(epoch, ce_sum / len(train), 0.0, correct / len(train),
                                     evaluate(model, test), 1.0, 1.0, 1.0, 0.0, seconds))
        log.info("epoch %d ce %.4f test %.4f", epoch, records[-1].ce_loss, records[-1].test_acc)
    return RunResult(model, records)


def _aug(cfg: ExperimentConfig) -> Optional[tuple]:
    return (cfg.dataset.pad, cfg.dataset.flip_prob) if cfg.dataset.augment else None


def train_teacher(cfg: ExperimentConfig, data: Optional[tuple[Dataset, Dataset]] = None,
                  write: bool = True) -> RunResult:
    """Train the teacher described by ``cfg.teacher`` and save its checkpoint."""
    t_start = time.perf_counter()
    train, test = data or load_data(cfg)
    init_seed, _, _ = derive_seeds(cfg.seed)
    spec = model_spec(cfg.teacher, train, init_seed)
    result = train_supervised(spec, train, test, cfg.teacher.epochs, cfg.batch_size,
                              cfg.teacher.optimizer, cfg.seed, _aug(cfg), cfg.record_wallclock)
    if write:
        ckpt = Path(cfg.teacher.checkpoint)
        out = ckpt.parent
        try:
            save_checkpoint(ckpt, result.model, meta={"role": "teacher", "seed": cfg.seed})
            write_metrics(out / "metrics.csv", result.records)
            dump_config(cfg, out / "config.yaml")
            _write_summary(out, cfg, result, "teacher", time.perf_counter() - t_start,
                           {"checkpoint": str(ckpt)})
        except OSError as exc:
            raise TrainingError(f"cannot write teacher outputs under {out}: {exc}") from exc
        result.out_dir = out
    return result


def train_baseline(cfg: ExperimentConfig, data: Optional[tuple[Dataset, Dataset]] = None) -> RunResult:
    """The student architecture trained on labels alone (no teacher)."""
    train, test = data or load_data(cfg)
    init_seed, _, _ = derive_seeds(cfg.seed)
    spec = model_spec(cfg.student, train, init_seed)
    return train_supervised(spec, train, test, cfg.epochs, cfg.batch_size, cfg.optimizer,
                            cfg.seed, _aug(cfg), cfg.record_wallclock)


# -- distillation -----------------------------------------------------------------------------
def build_temperature(cfg: ExperimentConfig, num_classes: int) -> Optional[TemperatureModule]:
    t = cfg.temperature
    if cfg.tau_fixed is not None or t is None:
        return None
    _, temp_seed, _ = derive_seeds(cfg.seed)
    if t.kind == "global":
        return TemperatureModule.global_t(t.init, t.tau_init, t.tau_range)
    module = TemperatureModule.instance_t(num_classes, t.hidden, temp_seed, t.tau_init, t.tau_range)
    return module


def _abort(out: Optional[Path], student: Model, temp: Optional[TemperatureModule],
           records: list[MetricsRecord], info: dict) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    extra = {"temperature": temp.params} if temp is not None else None
    save_checkpoint(out / "last_good.npz", student, extra)
    write_metrics(out / "metrics.csv", records)
    (out / "diagnostics.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def distill_run(cfg: ExperimentConfig, teacher: Model, train: Dataset, test: Dataset,
                out: Optional[Path] = None, *, temperature_paths: bool = True) -> RunResult:
    """Distil ``teacher`` into a fresh student, all in memory.

    ``temperature_paths=False`` is only valid with a fixed temperature: no
    gate or temperature module is constructed at all and tau is a bare
    constant, i.e. plain KD.
    """
    if teacher.num_classes != train.num_classes:
        raise TrainingError(f"teacher has {teacher.num_classes} classes, "
                            f"data has {train.num_classes}")
    if not temperature_paths and cfg.tau_fixed is None:
        raise TrainingError("temperature paths can only be disabled for a fixed tau")
    init_seed, _, batch_seed = derive_seeds(cfg.seed)
    student = build(model_spec(cfg.student, train, init_seed))
    if student.num_classes != teacher.num_classes:
        raise TrainingError("teacher and student class counts differ")
    schedule: CurriculumSchedule = cfg.curriculum.schedule()
    temp = build_temperature(cfg, train.num_classes) if temperature_paths else None
    gate = GrlGate(0.0) if temperature_paths else None

    opt = OptimizerState.from_config(cfg.optimizer, cfg.epochs)
    params = student.params + (temp.params if temp is not None else [])
    # temperature parameters are exempt from weight decay
    decay_mask = [True] * len(student.params) + [False] * (len(params) - len(student.params))
    aug = _aug(cfg)
    a_ce, a_kd = cfg.loss.alpha_ce, cfg.loss.alpha_kd

    records: list[MetricsRecord] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.set_epoch(epoch)
        learnable = temp is not None and not schedule.in_delay(epoch)
        lam = schedule.lambda_at(epoch) if temp is not None else 0.0
        if gate is not None:
            gate.set_lambda(lam)
        if temp is None:
            fixed_tau = cfg.tau_fixed
        elif not learnable:
            fixed_tau = schedule.delay_tau
        else:
            fixed_tau = None

        ce_sum = kd_sum = correct = 0.0
        taus: list[np.ndarray] = []
        plan = BatchPlan(cfg.batch_size, batch_seed, epoch)
        for b, idx in enumerate(plan.batches(len(train))):
            x = _batch_features(train, idx, aug, [batch_seed, epoch, b])
            y = train.labels[idx]
            with ad.no_grad():
                q_t = forward(teacher, x)
            q_s = forward(student, x)
            if fixed_tau is not None:
                tau = Tensor(fixed_tau)
                if gate is not None:
                    tau = gate(tau)
            else:
                tau = gate(predict_temperature(temp, q_t, q_s))
            ce = cross_entropy(q_s, y)
            kd = kd_loss(q_t, q_s, tau)
            loss = total_loss(ce, kd, a_ce, a_kd)
            if not np.isfinite(loss.item()):
                info = {"epoch": epoch, "batch": b, "ce": ce.item(), "kd": kd.item(),
                        "tau": tau.data.reshape(-1).tolist()[:16], "lambda": lam}
                _abort(out, student, temp, records, info)
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            for p in params:
                p.grad = None
            loss.backward()
            sgd_step(opt, params, [p.grad for p in params], decay_mask)

            n = len(idx)
            ce_sum += ce.item() * n
            kd_sum += kd.item() * n
            correct += float(np.sum(q_s.data.argmax(axis=1) == y))
            taus.append(tau.data.reshape(-1))
        all_tau = np.concatenate(taus) if taus else np.array([cfg.tau_fixed or 0.0])
        seconds = time.perf_counter() - t0 if cfg.record_wallclock else 0.0
        rec = MetricsRecord(epoch, ce_sum / len(train), kd_sum / len(train), correct / len(train),
                            evaluate(student, test), float(all_tau.mean()), float(all_tau.min()),
                            float(all_tau.max()), lam, seconds)
        records.append(rec)
        log.info("epoch %d ce %.4f kd %.4f test %.4f tau %.3f lambda %.3f", epoch, rec.ce_loss,
                 rec.kd_loss, rec.test_acc, rec.tau_mean, lam)
    return RunResult(student, records, temp, out)


def distill(cfg: ExperimentConfig, teacher: Optional[Model] = None,
            data: Optional[tuple[Dataset, Dataset]] = None, write: bool = True) -> RunResult:
    """Full distillation run: load inputs, train, and write the run directory."""
    t_start = time.perf_counter()
    if teacher is None:
        ckpt = Path(cfg.teacher.checkpoint)
        if not ckpt.exists():
            raise TrainingError(f"teacher checkpoint not found: {ckpt}")
        teacher = load_checkpoint(ckpt)
    train, test = data or load_data(cfg)
    out = Path(cfg.out) if write else None
    result = distill_run(cfg, teacher, train, test, out)
    if write:
        try:
            out.mkdir(parents=True, exist_ok=True)
            extra, meta = None, {"role": "student", "seed": cfg.seed}
            if result.temperature is not None:
                t = result.temperature
                extra = {"temperature": t.params}
                meta["temperature"] = {"kind": t.kind, "tau_init": t.tau_init,
                                       "tau_range": t.tau_range, "hidden": t.hidden}
            save_checkpoint(out / "student.npz", result.model, extra, meta)
            write_metrics(out / "metrics.csv", result.records)
            dump_config(cfg, out / "config.yaml")
            _write_summary(out, cfg, result, "distill", time.perf_counter() - t_start,
                           {"learnable_temperature": result.temperature is not None,
                            "tau_fixed": cfg.tau_fixed})
        except OSError as exc:
            raise TrainingError(f"cannot write run outputs under {out}: {exc}") from exc
    return result


def load_temperature(path) -> Optional[TemperatureModule]:
    """Rebuild the temperature module stored alongside a student checkpoint."""
    header, groups = read_checkpoint(path)
    info = header["meta"].get("temperature")
    if info is None:
        return None
    params = [Tensor(a, True) for a in groups["temperature"]]
    num_classes = header["spec"]["widths"][-1]
    return TemperatureModule(info["kind"], num_classes, info["tau_init"], info["tau_range"],
                             info["hidden"], params)


# -- temperature grid search -------------------------------------------------------------------
def grid_search_tau(cfg: ExperimentConfig, taus: Sequence[float], seeds: Sequence[int] = (0,),
                    teacher: Optional[Model] = None,
                    data: Optional[tuple[Dataset, Dataset]] = None,
                    include_ctkd: bool = True) -> list[dict]:
    """Fixed-tau distillation for each value in ``taus`` plus a learned-tau row.

    Each row reports the final test accuracy per seed and its mean.
    """
    if not taus:
        raise ValueError("need at least one temperature")
    if teacher is None:
        ckpt = Path(cfg.teacher.checkpoint)
        if not ckpt.exists():
            raise TrainingError(f"teacher checkpoint not found: {ckpt}")
        teacher = load_checkpoint(ckpt)
    data = data or load_data(cfg)

    def row(label: str, run_cfg_for_seed) -> dict:
        accs = [distill_run(run_cfg_for_seed(s), teacher, *data).final_test_acc for s in seeds]
        return {"tau": label, "test_acc_mean": float(np.mean(accs)), "test_acc": accs}

    rows = [row(_fmt_tau(t), lambda s, t=t: cfg.with_overrides(seed=s, tau_fixed=float(t)))
            for t in taus]
    if include_ctkd:
        learned = cfg
        if cfg.temperature is None:
            learned = parse_config({**cfg.echo(), "tau_fixed": None, "temperature": {}})
        rows.append(row("learned", lambda s: learned.with_overrides(seed=s)))
    return rows


def _fmt_tau(t: float) -> str:
    return f"{float(t):g}"


def write_table(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_seeds = max(len(r["test_acc"]) for r in rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "test_acc_mean", *(f"seed_{i}" for i in range(n_seeds))])
        for r in rows:
            w.writerow([r["tau"], repr(r["test_acc_mean"]), *(repr(a) for a in r["test_acc"])])
    return path
