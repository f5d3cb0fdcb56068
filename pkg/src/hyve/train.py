"""Training loop, metrics, and the ablation / camera-agnostic experiment runners.

Training is plain seeded mini-batch Adam on patches cut from labeled cubes.
Batches are always single-camera (wavelength-aware models accept any channel
count, but a stacked batch needs one); the batch order across cameras is
shuffled per epoch from the run seed, so runs are exactly reproducible.
"""

from __future__ import annotations

from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import generate_scene, linear_interpolate, linspace_camera, sample_camera, \
    subset_camera, zero_pad_channels
from .errors import ConfigError, InputError
from .nets import ModelConfig, build_model

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "Sample",
    "adam_step",
    "AdamOptimizer",
    "patches_from_cube",
    "train",
    "evaluate",
    "metrics_from_confusion",
    "make_synthetic_task",
    "run_camera_agnostic_experiment",
    "run_g_sweep",
    "run_extension_ablation",
    "run_freeze_ablation",
]

Sample = namedtuple("Sample", ["x", "label", "wavelengths", "camera"])


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    freeze_gaussians: bool = False
    patch_size: int = 32
    # Means and variances live in raw nanometers, so an Adam step of ~lr nm is
    # negligible against a ~600 nm range; this factor scales their step size.
    gaussian_lr_scale: float = 1.0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("batch size and patch size must be positive")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)      # one value per epoch
    train_accuracy: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)   # empty when no test set
    wroi_track: list = field(default_factory=list)      # (epoch, wroi, mean, variance)
    final: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Adam


AdamState = namedtuple("AdamState", ["step", "m", "v"])


def adam_step(values, grads, state, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
    """One bias-corrected Adam update; pure function of its inputs.

    `values` and `grads` are parallel lists of arrays; returns
    (new_values, new_state).
    """
    if state is None:
        state = AdamState(0, [np.zeros_like(v) for v in values],
                          [np.zeros_like(v) for v in values])
    t = state.step + 1
    new_values, new_m, new_v = [], [], []
    for value, grad, m, v in zip(values, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_values.append(value - lr * m_hat / (np.sqrt(v_hat) + epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_values, AdamState(t, new_m, new_v)


class AdamOptimizer:
    """In-place Adam over a list of Variables, with optional per-parameter
    learning-rate scales."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 lr_scales=None):
        self.params = list(params)
        self.lr = lr
        self.lr_scales = list(lr_scales) if lr_scales else [1.0] * len(self.params)
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.state = None

    def step(self):
        values = [p.value for p in self.params]
        grads = [p.grad for p in self.params]
        new_values, self.state = adam_step(values, grads, self.state, self.lr,
                                           self.beta1, self.beta2, self.epsilon)
        for p, v, old, scale in zip(self.params, new_values, values, self.lr_scales):
            p.value = old + scale * (v - old) if scale != 1.0 else v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# data plumbing


def patches_from_cube(cube, patch_size):
    """Non-overlapping patches in C x h x w layout, labeled by majority vote."""
    if cube.labels is None:
        raise InputError("cube has no labels")
    h, w, _ = cube.data.shape
    patch_size = int(patch_size)
    samples = []
    for i in range(0, h - patch_size + 1, patch_size):
        for j in range(0, w - patch_size + 1, patch_size):
            window = cube.data[i:i + patch_size, j:j + patch_size]
            lab = cube.labels[i:i + patch_size, j:j + patch_size]
            label = int(np.bincount(lab.reshape(-1)).argmax())
            samples.append(Sample(np.ascontiguousarray(window.transpose(2, 0, 1)),
                                  label, cube.camera.wavelengths, cube.camera.name))
    if not samples:
        raise InputError("patch size %d larger than the %dx%d cube" % (patch_size, h, w))
    return samples


def _batches(samples, batch_size, rng):
    """Seeded single-camera batches in shuffled global order."""
    groups = {}
    for s in samples:
        groups.setdefault(s.wavelengths.tobytes(), []).append(s)
    batches = []
    for key in sorted(groups):
        group = groups[key]
        order = rng.permutation(len(group))
        for start in range(0, len(group), batch_size):
            batches.append([group[i] for i in order[start:start + batch_size]])
    rng.shuffle(batches)
    return batches


def _forward_batch(model, batch):
    x = np.stack([s.x for s in batch])
    labels = np.array([s.label for s in batch], dtype=np.int64)
    lam = batch[0].wavelengths if model.wavelength_aware else None
    return model.forward(x, lam), labels


# ---------------------------------------------------------------------------
# training and evaluation


def train(model, train_set, cfg, test_set=None):
    """Seeded mini-batch training; returns a fully populated TrainHistory."""
    cfg.validate()
    if not train_set:
        raise InputError("empty training set")
    params = model.parameters()
    gaussian_names = ("first.means", "first.raw_variances")
    if cfg.freeze_gaussians:
        params = [(n, p) for n, p in params if n not in gaussian_names]
    scales = [cfg.gaussian_lr_scale if n in gaussian_names else 1.0 for n, _ in params]
    opt = AdamOptimizer([p for _, p in params], lr=cfg.learning_rate,
                        beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon,
                        lr_scales=scales)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        correct = 0
        total = 0
        for batch in _batches(train_set, cfg.batch_size, rng):
            logits, labels = _forward_batch(model, batch)
            loss = ad.softmax_cross_entropy(logits, labels)
            model.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.value) * len(batch)
            correct += int((logits.value.argmax(axis=1) == labels).sum())
            total += len(batch)
        history.train_loss.append(loss_sum / total)
        history.train_accuracy.append(correct / total)
        if test_set is not None:
            history.test_accuracy.append(evaluate(model, test_set)["oa"])
        if model.wavelength_aware:
            history.wroi_track.extend(model.first.snapshot(epoch))
    history.final = evaluate(model, test_set if test_set is not None else train_set)
    return history


def predict(model, samples, batch_size=32):
    """Class predictions grouped per camera, returned in input order."""
    preds = np.empty(len(samples), dtype=np.int64)
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.wavelengths.tobytes(), []).append(i)
    for key in sorted(groups):
        idxs = groups[key]
        for start in range(0, len(idxs), batch_size):
            chunk = [samples[i] for i in idxs[start:start + batch_size]]
            logits, _ = _forward_batch(model, chunk)
            preds[idxs[start:start + batch_size]] = logits.value.argmax(axis=1)
    return preds


def metrics_from_confusion(confusion):
    """OA, AA (mean per-class recall over present classes) and Cohen's kappa."""
    cm = np.asarray(confusion, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise InputError("empty confusion matrix")
    oa = np.trace(cm) / total
    support = cm.sum(axis=1)
    present = support > 0
    recalls = np.zeros(cm.shape[0])
    recalls[present] = np.diag(cm)[present] / support[present]
    aa = recalls[present].mean()
    p_e = float((support * cm.sum(axis=0)).sum()) / (total * total)
    if p_e >= 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - p_e) / (1.0 - p_e)
    return {
        "oa": float(oa),
        "aa": float(aa),
        "kappa": float(kappa),
        "per_class": [float(r) for r in recalls],
        "classes_missing": bool(not present.all()),
    }


def evaluate(model, dataset):
    if not dataset:
        raise InputError("empty evaluation set")
    k = model.config.num_classes
    preds = predict(model, dataset)
    cm = np.zeros((k, k), dtype=np.int64)
    for s, p in zip(dataset, preds):
        if not 0 <= s.label < k:
            raise InputError("label %d out of range [0, %d)" % (s.label, k))
        cm[s.label, p] += 1
    return metrics_from_confusion(cm)


# ---------------------------------------------------------------------------
# synthetic multi-camera task and experiment runners


@dataclass
class TaskSpec:
    """Everything needed to rebuild the synthetic task deterministically."""
    classes: int = 3
    scene_size: int = 32
    tile_size: int = 8
    wavelength_range: tuple = (400.0, 1000.0)
    base_channels: int = 224
    train_scene_seeds: tuple = (11, 12, 13, 14)
    test_scene_seeds: tuple = (91, 92)
    noise_sd: float = 0.01
    patch_size: int = 8
    spectra_seed: int = 7  # class spectra are shared across all scenes of a task


def default_cameras(spec: TaskSpec):
    """Camera A: full linspace grid; camera B: every second channel of A."""
    cam_a = linspace_camera("camA", spec.wavelength_range[0], spec.wavelength_range[1],
                            spec.base_channels)
    cam_b = subset_camera(cam_a, 2, 0, "camB")
    return cam_a, cam_b


def make_synthetic_task(spec: TaskSpec, cameras):
    """Labeled cubes per split: every scene recorded by every camera."""
    def cubes_for(seeds, split_tag):
        out = []
        for scene_seed in seeds:
            scene = generate_scene(spec.classes, spec.scene_size, spec.scene_size,
                                   spec.wavelength_range, scene_seed, spec.tile_size,
                                   spectra_seed=spec.spectra_seed)
            for ci, cam in enumerate(cameras):
                noise_seed = scene_seed * 1000 + ci + split_tag
                out.append(sample_camera(scene, cam, spec.noise_sd, noise_seed))
        return out

    return cubes_for(spec.train_scene_seeds, 0), cubes_for(spec.test_scene_seeds, 500)


def _preprocess(cubes, preproc, cameras):
    if preproc == "none":
        return cubes
    if preproc == "zeropad":
        target = max(cam.channels for cam in cameras)
        return [zero_pad_channels(c, target) for c in cubes]
    if preproc == "interp":
        return [linear_interpolate(c, cameras[0]) for c in cubes]
    raise ConfigError("unknown preprocessing %r" % preproc)


def experiment_initial_variance(wavelength_range, num_wrois):
    """Variance override used by the experiment runners: sigma = half the
    mean spacing, so the initial Gaussians overlap and cover the whole range
    (the verbatim default (1/G)^2 * span leaves most wavelengths unseen)."""
    span = wavelength_range[1] - wavelength_range[0]
    return (span / (2.0 * max(num_wrois, 1))) ** 2


def _model_config(arch, spec, cameras, preproc, seed, num_wrois=5, widths=(25, 30, 50),
                  initial_variance=None):
    if arch in ("hyve", "hyve++"):
        return ModelConfig(arch, spec.classes, widths=widths, num_wrois=num_wrois,
                           wavelength_range=spec.wavelength_range, seed=seed,
                           initial_variance=initial_variance)
    if preproc == "zeropad":
        c_in = max(cam.channels for cam in cameras)
    else:
        c_in = cameras[0].channels
    return ModelConfig(arch, spec.classes, widths=widths, c_in=c_in, seed=seed)


def _run_job(job):
    """Train one (setting, seed) combination and evaluate per test camera.

    Top-level so sweeps can fan out over processes; the job dict holds only
    plain values.
    """
    spec = TaskSpec(**job["task"])
    cameras = list(default_cameras(spec))
    if job.get("single_camera"):
        cameras = cameras[:1]
    train_cubes, test_cubes = make_synthetic_task(spec, cameras)
    preproc = job["preproc"]
    cfg = TrainConfig(**job["train"])
    num_wrois = job.get("num_wrois", 5)
    model = build_model(_model_config(
        job["arch"], spec, cameras, preproc, cfg.seed, num_wrois=num_wrois,
        widths=tuple(job.get("widths", (25, 30, 50))),
        initial_variance=experiment_initial_variance(spec.wavelength_range, num_wrois)))
    train_samples = [s for c in _preprocess(train_cubes, preproc, cameras)
                     for s in patches_from_cube(c, spec.patch_size)]
    train(model, train_samples, cfg)
    rows = []
    for cam in cameras:
        cam_cubes = [c for c in test_cubes if c.camera.name == cam.name]
        samples = [s for c in _preprocess(cam_cubes, preproc, cameras)
                   for s in patches_from_cube(c, spec.patch_size)]
        metrics = evaluate(model, samples)
        rows.append({"experiment": job["experiment"], "setting": job["setting"],
                     "seed": cfg.seed, "camera": cam.name,
                     "oa": metrics["oa"], "aa": metrics["aa"], "kappa": metrics["kappa"]})
    return rows


def _run_jobs(jobs, max_workers=1):
    if max_workers <= 1:
        results = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(_run_job, jobs))
    return [row for rows in results for row in rows]


def _task_dict(spec):
    d = spec.__dict__.copy()
    d["wavelength_range"] = tuple(d["wavelength_range"])
    return d


def _train_dict(cfg, seed, freeze=False):
    return {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate, "beta1": cfg.beta1, "beta2": cfg.beta2,
            "epsilon": cfg.epsilon, "seed": seed, "freeze_gaussians": freeze,
            "patch_size": cfg.patch_size, "gaussian_lr_scale": cfg.gaussian_lr_scale}


def run_camera_agnostic_experiment(spec=None, cfg=None, seeds=(1, 2, 3),
                                   archs=("hyve++", "conv2d+zeropad", "conv2d+interp"),
                                   max_workers=1):
    """Train each architecture on mixed two-camera data; evaluate per camera.

    Architecture names may carry their preprocessing after a '+'; wavelength-
    aware architectures consume both cameras natively.
    """
    spec = spec or TaskSpec()
    cfg = cfg or TrainConfig(epochs=40, batch_size=8, learning_rate=1e-3, patch_size=8,
                             gaussian_lr_scale=100.0)
    jobs = []
    for arch_setting in archs:
        if arch_setting in ("hyve", "hyve++"):
            arch, preproc = arch_setting, "none"
        else:
            arch, _, preproc = arch_setting.partition("+")
            preproc = preproc or "none"
        for seed in seeds:
            jobs.append({"experiment": "camera-agnostic", "setting": arch_setting,
                         "arch": arch, "preproc": preproc, "task": _task_dict(spec),
                         "train": _train_dict(cfg, seed)})
    return _run_jobs(jobs, max_workers)


def run_g_sweep(g_values, spec=None, cfg=None, seeds=(1, 2, 3), max_workers=1):
    """Accuracy of the extended model for different WROI counts, camera A only."""
    if len(g_values) < 2:
        raise InputError("sweep needs at least two settings")
    spec = spec or TaskSpec()
    cfg = cfg or TrainConfig(epochs=40, batch_size=8, learning_rate=1e-3, patch_size=8,
                             gaussian_lr_scale=100.0)
    jobs = [{"experiment": "g", "setting": str(g), "arch": "hyve++", "preproc": "none",
             "num_wrois": int(g), "single_camera": True,
             "task": _task_dict(spec), "train": _train_dict(cfg, seed)}
            for g in g_values for seed in seeds]
    return _run_jobs(jobs, max_workers)


def run_extension_ablation(spec=None, cfg=None, seeds=(1, 2, 3), max_workers=1):
    """Baseline depthwise-separable vs plain vs extended wavelength-aware model."""
    spec = spec or TaskSpec()
    cfg = cfg or TrainConfig(epochs=40, batch_size=8, learning_rate=1e-3, patch_size=8,
                             gaussian_lr_scale=100.0)
    jobs = []
    for arch in ("ds", "hyve", "hyve++"):
        for seed in seeds:
            jobs.append({"experiment": "extension", "setting": arch, "arch": arch,
                         "preproc": "none", "single_camera": True,
                         "task": _task_dict(spec), "train": _train_dict(cfg, seed)})
    return _run_jobs(jobs, max_workers)


def run_freeze_ablation(spec=None, cfg=None, seeds=(1, 2, 3), max_workers=1):
    """Trained vs frozen Gaussian parameters, camera A only."""
    spec = spec or TaskSpec()
    cfg = cfg or TrainConfig(epochs=40, batch_size=8, learning_rate=1e-3, patch_size=8,
                             gaussian_lr_scale=100.0)
    jobs = []
    for setting, freeze in (("trained", False), ("frozen", True)):
        for seed in seeds:
            jobs.append({"experiment": "freeze", "setting": setting, "arch": "hyve++",
                         "preproc": "none", "single_camera": True,
                         "task": _task_dict(spec), "train": _train_dict(cfg, seed, freeze)})
    return _run_jobs(jobs, max_workers)


def mean_oa_by_setting(rows):
    """Mean OA per setting across seeds and cameras."""
    acc = {}
    for row in rows:
        acc.setdefault(row["setting"], []).append(row["oa"])
    return {k: float(np.mean(v)) for k, v in acc.items()}
