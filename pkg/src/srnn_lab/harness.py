"""Training loop, evaluation, metric logging and runtime benchmarking."""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baseline, models, optim, srnn, tasks
from .tasks import PixelTask, TaskBatch, batch_loss

log = logging.getLogger(__name__)

TASKS = ("memcopy", "adding", "pmnist", "capacity")
GENERATOR_TASKS = ("memcopy", "adding")
METRICS_HEADER = ["step", "samples_seen", "train_loss", "eval_metric", "grad_norm", "wallclock_ms"]
EVAL_CHUNK = 250


class ConfigError(ValueError):
    pass


class NumericAbort(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass
class ExperimentConfig:
    task: str = "memcopy"
    T: int = 100
    crop: int = 0  # 0 = full 28x28 image
    N: int = 0  # random-label subset size for capacity runs
    data_dir: str = "data/mnist"
    permute_seed: int = 1  # 0 keeps raster order
    val_size: int = 5000
    model: str = "srnn"
    d_h: int = 128
    hidden: tuple = (8,)
    d_e: int = 32
    gating: bool = True
    activation: str = ""  # empty = model default (relu for srnn, tanh for rnn)
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    decay: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 0.0  # global-norm clipping, vanilla RNN only; 0 disables
    batch: int = 20
    steps: int = 10000  # budget for generator tasks
    epochs: int = 60  # budget for dataset tasks
    eval_every: int = 100  # steps; dataset tasks evaluate once per epoch
    eval_size: int = 1000
    stop_at: float = math.nan  # stop once eval_metric reaches this value
    seed: int = 0
    threads: int = 0  # 0 = library default; 1 = reproducible single-threaded mode
    out: str = ""

    def resolved_activation(self) -> str:
        return self.activation or ("relu" if self.model == "srnn" else "tanh")

    def higher_is_better(self) -> bool:
        return self.task in ("pmnist", "capacity")


PRESETS: dict[str, dict] = {
    "memcopy": dict(task="memcopy", T=100, model="srnn", d_h=128, hidden=(8,), batch=20, steps=10000),
    "adding": dict(task="adding", T=100, model="srnn", d_h=128, hidden=(32,), batch=50, steps=4000),
    "pmnist-crop8": dict(task="pmnist", crop=8, d_h=1024, hidden=(32, 32, 32), batch=100, epochs=60),
    "pmnist-crop16": dict(task="pmnist", crop=16, d_h=1024, hidden=(32, 32, 32), batch=100, epochs=60),
    "pmnist-full": dict(task="pmnist", crop=0, d_h=1024, hidden=(32, 32, 32), batch=100, epochs=60),
    "capacity": dict(task="capacity", crop=8, N=100, permute_seed=0, model="srnn", d_h=256,
                     hidden=(32, 32, 32), batch=20, epochs=100),
}

# roughly 15k parameters each on 8x8 crops
CAPACITY_MODELS = {
    "srnn": dict(model="srnn", d_h=256, hidden=(32, 32, 32)),
    "rnn": dict(model="rnn", d_h=116),
}


# --- configuration ---------------------------------------------------------


def _field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(ExperimentConfig)}


def parse_value(key: str, raw: str):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("on", "true", "yes", "1"):
                return True
            if lowered in ("off", "false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "on" if v else "off"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def make_config(preset: str | None = None, file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        values.update(PRESETS[preset])
    values.update(file_values or {})
    values.update(overrides or {})
    unknown = set(values) - set(_field_types())
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    cfg = ExperimentConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.task in TASKS, f"unknown task {cfg.task!r}")
    need(cfg.model in ("srnn", "rnn"), f"unknown model {cfg.model!r}")
    need(cfg.optimizer in ("rmsprop", "adam"), f"unknown optimizer {cfg.optimizer!r}")
    need(cfg.resolved_activation() in ("relu", "tanh", "identity"), f"unknown activation {cfg.activation!r}")
    need(cfg.T >= (2 if cfg.task == "adding" else 1), f"T must be positive (adding needs T >= 2), got {cfg.T}")
    need(cfg.crop in (0, 8, 16), f"crop must be 0, 8 or 16, got {cfg.crop}")
    need(cfg.d_h >= 1 and cfg.d_e >= 1, "d_h and d_e must be positive")
    need(all(h >= 1 for h in cfg.hidden), f"hidden sizes must be positive, got {cfg.hidden}")
    need(cfg.batch >= 1, f"batch must be positive, got {cfg.batch}")
    need(cfg.steps >= 0 and cfg.epochs >= 0, "training budget must be non-negative")
    need(cfg.eval_every >= 1 and cfg.eval_size >= 1, "eval_every and eval_size must be positive")
    need(cfg.lr > 0 and 0 <= cfg.decay < 1, "lr must be positive and decay in [0, 1)")
    need(cfg.clip >= 0, "clip must be non-negative")
    need(not (cfg.clip > 0 and cfg.model == "srnn"), "gradient clipping is only available for the rnn baseline")
    need(cfg.threads >= 0, "threads must be >= 0")
    if cfg.task == "capacity":
        need(cfg.N >= 1, "capacity runs need N >= 1")
        need(cfg.crop in (8, 16), "capacity runs need crop 8 or 16")


# --- model / task construction ----------------------------------------------


def build_model(cfg: ExperimentConfig, d_in: int | None, d_out: int, vocab: int | None = None):
    act = cfg.resolved_activation()
    d_e = cfg.d_e if vocab is not None else None
    if cfg.model == "srnn":
        return srnn.init_params(d_in, cfg.d_h, d_out, cfg.hidden, vocab=vocab, d_e=d_e, seed=cfg.seed,
                                activation=act, gating=cfg.gating)
    return baseline.rnn_init(d_in, cfg.d_h, d_out, seed=cfg.seed, vocab=vocab, d_e=d_e, activation=act)


def _rng(cfg, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


def generator_for(cfg: ExperimentConfig):
    if cfg.task == "memcopy":
        return lambda batch, rng: tasks.gen_memcopy(cfg.T, batch, rng)
    return lambda batch, rng: tasks.gen_adding(cfg.T, batch, rng)


def eval_batches(cfg: ExperimentConfig) -> list[TaskBatch]:
    gen = generator_for(cfg)
    rng = _rng(cfg, 2)
    sizes = [EVAL_CHUNK] * (cfg.eval_size // EVAL_CHUNK)
    if cfg.eval_size % EVAL_CHUNK:
        sizes.append(cfg.eval_size % EVAL_CHUNK)
    return [gen(n, rng) for n in sizes]


@dataclass
class DatasetSplits:
    train: PixelTask
    val: PixelTask  # what eval_metric is computed on
    test: PixelTask | None = None


def load_dataset_task(cfg: ExperimentConfig) -> DatasetSplits:
    try:
        ds = tasks.find_mnist(cfg.data_dir, "train")
    except tasks.IdxError as e:
        raise ConfigError(str(e)) from None
    crop = cfg.crop or None
    if cfg.task == "capacity":
        if cfg.N > ds.N:
            raise ConfigError(f"N={cfg.N} exceeds the {ds.N} available images")
        sub = tasks.shuffle_labels_subset(ds, cfg.N, cfg.seed)
        view = tasks.make_pixel_sequences(sub, crop, cfg.permute_seed)
        return DatasetSplits(view, view)
    view = tasks.make_pixel_sequences(ds, crop, cfg.permute_seed)
    if cfg.val_size >= view.N:
        raise ConfigError(f"val_size={cfg.val_size} leaves no training data out of {view.N}")
    train_idx, val_idx = tasks.holdout_split(view.N, cfg.val_size, cfg.seed)
    test = None
    with contextlib.suppress(tasks.IdxError):
        test = tasks.make_pixel_sequences(tasks.find_mnist(cfg.data_dir, "test"), crop, cfg.permute_seed)
    return DatasetSplits(view.subset(train_idx), view.subset(val_idx), test)


# --- evaluation --------------------------------------------------------------


def _batches_of(data, chunk=EVAL_CHUNK):
    if isinstance(data, PixelTask):
        for start in range(0, data.N, chunk):
            yield data.batch(np.arange(start, min(start + chunk, data.N)))
    elif isinstance(data, TaskBatch):
        yield data
    else:
        yield from data


def evaluate_full(params, data) -> dict:
    """Sample-weighted loss and metric over ``data`` (a PixelTask, TaskBatch or list of them)."""
    module = models.module_for(params)
    total, loss_sum, correct, kind = 0, 0.0, 0, None
    for batch in _batches_of(data):
        if batch.loss_kind in ("per_step_ce", "final_ce"):
            n_classes = int(batch.targets.max()) + 1 if batch.targets.size else 0
            if params.d_o < n_classes:
                raise ValueError(f"model has {params.d_o} outputs but data has class {n_classes - 1}")
        elif params.d_o != 1:
            raise ValueError(f"regression task needs one output, model has {params.d_o}")
        outputs, _ = module.forward(params, batch.inputs)
        loss, _ = batch_loss(outputs, batch)
        n = batch.batch_size
        total += n
        loss_sum += float(loss) * n
        kind = batch.loss_kind
        if kind == "final_ce":
            correct += int(np.sum(outputs[-1].argmax(axis=-1) == batch.targets))
    mean_loss = loss_sum / total
    metric = correct / total if kind == "final_ce" else mean_loss
    return {"loss": mean_loss, "metric": metric, "kind": kind, "samples": total}


def evaluate(params, model_id: str | None, data) -> float:
    """Accuracy for classification, mean cross-entropy for MemCopy, MSE for Adding."""
    if model_id is not None and models.get(model_id) is not models.module_for(params):
        raise ValueError(f"checkpoint is not a {model_id} model")
    return evaluate_full(params, data)["metric"]


# --- training ----------------------------------------------------------------


@dataclass
class MetricRecord:
    step: int
    samples_seen: int
    train_loss: float
    eval_metric: float
    grad_norm: float
    wallclock_ms: float

    def row(self, with_time: bool = True):
        ms = self.wallclock_ms if with_time else 0
        return [self.step, self.samples_seen, repr(self.train_loss), repr(self.eval_metric),
                repr(self.grad_norm), f"{ms:.3f}" if with_time else "0"]


@dataclass
class TrainResult:
    config: ExperimentConfig
    params: object
    records: list[MetricRecord]
    summary: dict = field(default_factory=dict)

    @property
    def final(self) -> MetricRecord:
        return self.records[-1]

    def best_metric(self) -> float:
        vals = [r.eval_metric for r in self.records]
        return max(vals) if self.config.higher_is_better() else min(vals)


@contextlib.contextmanager
def thread_limit(threads: int):
    if threads <= 0:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


class _MetricLog:
    def __init__(self, out_dir: Path | None, reproducible: bool):
        self.records: list[MetricRecord] = []
        self.reproducible = reproducible
        self._files = []
        self._writer = self._timing = None
        if out_dir is not None:
            f = open(out_dir / "metrics.csv", "w", newline="")
            self._files.append(f)
            self._writer = csv.writer(f)
            self._writer.writerow(METRICS_HEADER)
            if reproducible:
                # wall time is not reproducible; it goes to a sidecar file
                tf = open(out_dir / "timing.csv", "w", newline="")
                self._files.append(tf)
                self._timing = csv.writer(tf)
                self._timing.writerow(["step", "wallclock_ms"])

    def add(self, rec: MetricRecord):
        if self.records and (rec.step < self.records[-1].step or rec.samples_seen < self.records[-1].samples_seen):
            raise RuntimeError("metric records must be logged in step order")
        self.records.append(rec)
        if self._writer is not None:
            self._writer.writerow(rec.row(with_time=not self.reproducible))
            if self._timing is not None:
                self._timing.writerow([rec.step, f"{rec.wallclock_ms:.3f}"])
            for f in self._files:
                f.flush()
        log.info("step %d samples %d train %.5f eval %.5f |g| %.3g", rec.step, rec.samples_seen,
                 rec.train_loss, rec.eval_metric, rec.grad_norm)

    def close(self):
        for f in self._files:
            f.close()


def _reached(cfg: ExperimentConfig, metric: float) -> bool:
    if math.isnan(cfg.stop_at):
        return False
    return metric >= cfg.stop_at if cfg.higher_is_better() else metric <= cfg.stop_at


def _train_step(module, params, batch, opt_state, cfg):
    # overflow is detected below and turned into an abort, so numpy's warnings add nothing
    with np.errstate(over="ignore", invalid="ignore"):
        outputs, trace = module.forward(params, batch.inputs)
        loss, dO = batch_loss(outputs, batch)
        loss = float(loss)
        grads = module.backward(params, trace, dO)
        gnorm = optim.global_grad_norm(grads)
    if not (math.isfinite(loss) and math.isfinite(gnorm)):
        return loss, gnorm, False
    if cfg.clip > 0:
        assert cfg.model != "srnn", "SRNN training never clips gradients"
        grads = optim.clip_to(grads, cfg.clip)
    optim.step(params.arrays(), grads, opt_state)
    return loss, gnorm, True


def train(cfg: ExperimentConfig, out_dir=None) -> TrainResult:
    """Run one experiment; writes metrics.csv, checkpoint.bin and config.txt into ``out_dir``."""
    validate_config(cfg)
    out_dir = Path(out_dir or cfg.out) if (out_dir or cfg.out) else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(format_config(cfg))
    with thread_limit(cfg.threads):
        if cfg.task in GENERATOR_TASKS:
            result = _train_generator(cfg, out_dir)
        else:
            result = _train_dataset(cfg, out_dir)
    if out_dir is not None:
        models.module_for(result.params).save(result.params, out_dir / "checkpoint.bin",
                                              {"task": cfg.task, "T": str(cfg.T), "crop": str(cfg.crop),
                                               "permute_seed": str(cfg.permute_seed)})
        if result.summary:
            (out_dir / "summary.txt").write_text("".join(f"{k} = {v}\n" for k, v in result.summary.items()))
    return result


def _optimizer(cfg):
    return optim.OptimizerState(cfg.optimizer, lr=cfg.lr, decay=cfg.decay, beta1=cfg.beta1,
                                beta2=cfg.beta2, eps=cfg.eps)


def _abort(logger, rec, msg):
    logger.add(rec)
    logger.close()
    raise NumericAbort(msg, rec)


def _train_generator(cfg: ExperimentConfig, out_dir) -> TrainResult:
    if cfg.task == "memcopy":
        params = build_model(cfg, None, tasks.MEMCOPY_CLASSES, vocab=tasks.MEMCOPY_VOCAB)
    else:
        params = build_model(cfg, 2, 1)
    module = models.module_for(params)
    gen = generator_for(cfg)
    train_rng = _rng(cfg, 1)
    evals = eval_batches(cfg)
    opt_state = _optimizer(cfg)
    logger = _MetricLog(out_dir, cfg.threads == 1)
    t0 = time.perf_counter()

    def elapsed():
        return (time.perf_counter() - t0) * 1000.0

    first = evaluate_full(params, evals)
    grads0 = module.backward(params, *_trace_and_grad(module, params, evals[0]))
    logger.add(MetricRecord(0, 0, first["loss"], first["metric"], optim.global_grad_norm(grads0), elapsed()))
    window_loss, window_n, gnorm = 0.0, 0, 0.0
    for step in range(1, cfg.steps + 1):
        batch = gen(cfg.batch, train_rng)
        loss, gnorm, ok = _train_step(module, params, batch, opt_state, cfg)
        if not ok:
            _abort(logger, MetricRecord(step, step * cfg.batch, loss, math.nan, gnorm, elapsed()),
                   f"non-finite loss/gradient at step {step}")
        window_loss += loss
        window_n += 1
        if step % cfg.eval_every == 0 or step == cfg.steps:
            metric = evaluate_full(params, evals)["metric"]
            logger.add(MetricRecord(step, step * cfg.batch, window_loss / window_n, metric, gnorm, elapsed()))
            window_loss, window_n = 0.0, 0
            if _reached(cfg, metric):
                break
    logger.close()
    return TrainResult(cfg, params, logger.records)


def _trace_and_grad(module, params, batch):
    outputs, trace = module.forward(params, batch.inputs)
    _, dO = batch_loss(outputs, batch)
    return trace, dO


def _train_dataset(cfg: ExperimentConfig, out_dir) -> TrainResult:
    splits = load_dataset_task(cfg)
    params = build_model(cfg, 1, 10)
    module = models.module_for(params)
    rng = _rng(cfg, 1)
    opt_state = _optimizer(cfg)
    logger = _MetricLog(out_dir, cfg.threads == 1)
    t0 = time.perf_counter()
    n = splits.train.N

    def elapsed():
        return (time.perf_counter() - t0) * 1000.0

    def epoch_eval():
        val = evaluate_full(params, splits.val)
        test = evaluate_full(params, splits.test)["metric"] if splits.test is not None else math.nan
        return val, test

    val, test = epoch_eval()
    probe = splits.train.batch(np.arange(min(cfg.batch, n)))
    grads0 = module.backward(params, *_trace_and_grad(module, params, probe))
    logger.add(MetricRecord(0, 0, val["loss"], val["metric"], optim.global_grad_norm(grads0), elapsed()))
    best = {"epoch": 0, "val_loss": val["loss"], "val_metric": val["metric"], "test_metric": test}
    step, seen, gnorm = 0, 0, 0.0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            loss, gnorm, ok = _train_step(module, params, splits.train.batch(idx), opt_state, cfg)
            step += 1
            seen += len(idx)
            if not ok:
                _abort(logger, MetricRecord(step, seen, loss, math.nan, gnorm, elapsed()),
                       f"non-finite loss/gradient at epoch {epoch} step {step}")
            epoch_loss += loss * len(idx)
        val, test = epoch_eval()
        logger.add(MetricRecord(step, seen, epoch_loss / n, val["metric"], gnorm, elapsed()))
        if val["loss"] < best["val_loss"]:
            best = {"epoch": epoch, "val_loss": val["loss"], "val_metric": val["metric"], "test_metric": test}
        if _reached(cfg, val["metric"]):
            break
    logger.close()
    summary = {f"best_{k}": v for k, v in best.items()} if cfg.task == "pmnist" else {}
    return TrainResult(cfg, params, logger.records, summary)


# --- capacity ----------------------------------------------------------------


def capacity_run(N: int, crop: int, model_configs: dict | None = None, out_dir=None, **overrides) -> dict[str, list[float]]:
    """Fit shuffled labels of N cropped images with each model; returns per-epoch train accuracy."""
    model_configs = model_configs or CAPACITY_MODELS
    curves = {}
    for name, mc in model_configs.items():
        values = dict(PRESETS["capacity"])
        values.update(mc)
        values.update(N=N, crop=crop)
        values.update(overrides)
        cfg = ExperimentConfig(**values)
        sub_dir = Path(out_dir) / name if out_dir else None
        result = train(cfg, sub_dir)
        curves[name] = [r.eval_metric for r in result.records]
    if out_dir is not None:
        with open(Path(out_dir) / "capacity.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "model", "train_accuracy"])
            for name, curve in curves.items():
                for epoch, acc in enumerate(curve):
                    w.writerow([epoch, name, repr(acc)])
    return curves


# --- runtime -----------------------------------------------------------------


def _bench_setup(model: str, d_h: int, T: int, d_i: int, batch: int, hidden, shape: str, seed: int):
    rng = np.random.default_rng(seed)
    cfg = ExperimentConfig(model=model, d_h=d_h, hidden=tuple(hidden), seed=seed)
    if shape == "memcopy":
        params = build_model(cfg, None, tasks.MEMCOPY_CLASSES, vocab=tasks.MEMCOPY_VOCAB)
        data = tasks.gen_memcopy(max(T - 20, 1), batch, rng)
    else:
        params = build_model(cfg, d_i, 1)
        inputs = rng.uniform(size=(T, batch, d_i))
        mask = np.zeros(T, dtype=bool)
        mask[-1] = True
        data = TaskBatch(inputs, rng.uniform(size=batch), mask, "final_mse")
    return params, data


def runtime_benchmark(model: str, d_h_list, T: int = 300, d_i: int = 2, batch: int = 1, repeats: int = 5,
                      hidden=(32,), shape: str = "synthetic", warmup: int = 1, seed: int = 0) -> list[tuple[int, float]]:
    """Median seconds for one forward + backward + RMSProp update at each hidden size."""
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    rows = []
    for d_h in d_h_list:
        params, data = _bench_setup(model, d_h, T, d_i, batch, hidden, shape, seed)
        module = models.module_for(params)
        state = optim.OptimizerState("rmsprop")
        cfg = ExperimentConfig(model=model)
        for _ in range(warmup):
            _train_step(module, params, data, state, cfg)
        times = []
        for _ in range(repeats):
            t = time.perf_counter()
            _train_step(module, params, data, state, cfg)
            times.append(time.perf_counter() - t)
        rows.append((int(d_h), float(np.median(times))))
    return rows


def loglog_slope(rows) -> float:
    d = np.log([r[0] for r in rows])
    s = np.log([r[1] for r in rows])
    return float(np.polyfit(d, s, 1)[0])


def write_benchmark_csv(rows, path, model: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "d_h", "seconds_per_step"])
        for d_h, sec in rows:
            w.writerow([model, d_h, repr(sec)])


def config_keys() -> list[str]:
    return [f.name for f in dataclasses.fields(ExperimentConfig)]
