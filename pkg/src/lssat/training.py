"""Joint classification + masked-reconstruction objectives and training.

One training step runs two streams through the shared encoder:

* classification stream: the full (unmasked) tensor of the configured
  classify modality -> encoder -> mean-pool classifier -> cross-entropy.
* reconstruction stream: the configured mask modality is patch-masked,
  visible tokens -> encoder -> decoder -> full patch predictions, scored
  by masked-region MSE against each configured target modality (losses
  averaged when there are two targets).

The two losses combine as lam * cls + (1 - lam) * rec, evaluated in a
form whose lam = 0 / lam = 1 boundaries are exact. Optimization is
momentum SGD with decoupled weight decay (1-D parameters exempt) under
a cosine learning-rate schedule.

Everything is keyed off (seed, epoch, step), so a rerun of the same
config is bit-identical.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .ldp import ldp_tensor
from .metrics import RunReport, SweepGrid, accuracy, score_roc_auc
from .model import Model, backbone_preset
from .patches import MaskPlan, patchify_tokens, sample_mask

RGB = "rgb"
LDP = "ldp"


class ConfigError(ValueError):
    pass


class NumericFailure(FloatingPointError):
    """Training produced a non-finite loss."""


# the five benchmark rows: four cross-modality variants plus the plain
# all-RGB baseline (reconstruct sets stored sorted for validation)
_VALID_TRIPLETS = {
    (LDP, (RGB,), RGB),
    (LDP, (RGB,), LDP),
    (RGB, (LDP,), RGB),
    (RGB, (LDP, RGB), RGB),
    (RGB, (RGB,), RGB),
}


@dataclass(frozen=True)
class ConfigurationTriplet:
    """Which modality is masked, which are reconstructed, and which one
    feeds the classifier. Only the five supported variants validate."""
    mask: str
    reconstruct: tuple[str, ...]
    classify: str

    def __post_init__(self):
        object.__setattr__(self, "reconstruct", tuple(self.reconstruct))
        if self.as_tuple() not in _VALID_TRIPLETS:
            raise ConfigError(f"unsupported configuration triplet "
                              f"{self.name!r}; supported: "
                              f"{[t.name for t in standard_triplets()]}")

    def as_tuple(self):
        return (self.mask, tuple(sorted(self.reconstruct)), self.classify)

    @property
    def name(self) -> str:
        return f"{self.mask}:{'+'.join(self.reconstruct)}:{self.classify}"

    @classmethod
    def parse(cls, text: str) -> "ConfigurationTriplet":
        parts = text.lower().split(":")
        if len(parts) != 3:
            raise ConfigError(f"triplet must look like 'rgb:ldp:rgb', got "
                              f"{text!r}")
        return cls(mask=parts[0], reconstruct=tuple(parts[1].split("+")),
                   classify=parts[2])

    def needs_ldp(self) -> bool:
        return LDP in (self.mask, self.classify) or LDP in self.reconstruct


def standard_triplets() -> tuple:
    return (ConfigurationTriplet(LDP, (RGB,), RGB),
            ConfigurationTriplet(LDP, (RGB,), LDP),
            ConfigurationTriplet(RGB, (LDP,), RGB),
            ConfigurationTriplet(RGB, (RGB, LDP), RGB),
            ConfigurationTriplet(RGB, (RGB,), RGB))


@dataclass
class ExperimentConfig:
    """One experiment: a configuration triplet, a backbone preset, and
    the full hyperparameter set (defaults follow the reference recipe:
    224/16 inputs, batch 8, 75 epochs, cosine 5e-5 -> 1e-6, decay 0.05,
    drop path 0.01, lam 0.1, mask ratio 0.75)."""
    triplet: ConfigurationTriplet = field(
        default_factory=lambda: ConfigurationTriplet.parse("rgb:rgb:rgb"))
    preset: str = "vit-b"
    loss_lambda: float = 0.1
    mask_ratio: float = 0.75
    patch_size: int = 16
    image_size: int = 224
    batch_size: int = 8
    epochs: int = 75
    lr_max: float = 5e-5
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    drop_path: float = 0.01
    ldp_k: int = 3
    num_classes: int = 2
    seed: int = 0
    shared_encoder: bool = True

    def __post_init__(self):
        if isinstance(self.triplet, str):
            self.triplet = ConfigurationTriplet.parse(self.triplet)
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ConfigError(f"loss_lambda must be in [0,1], got "
                              f"{self.loss_lambda}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0,1), got "
                              f"{self.mask_ratio}")
        backbone_preset(self.preset)
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible "
                              f"by patch_size {self.patch_size}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["triplet"] = self.triplet.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                payload = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(payload)

    def build_model(self) -> Model:
        preset = replace(backbone_preset(self.preset),
                         drop_path_rate=self.drop_path)
        return Model(preset, image_size=self.image_size,
                     patch_size=self.patch_size,
                     num_classes=self.num_classes, seed=self.seed,
                     shared_encoder=self.shared_encoder)


# ---------------------------------------------------------------------------
# losses

def classification_loss(logits: ad.Tensor, labels) -> ad.Tensor:
    """Mean cross-entropy: -log softmax-probability of the true class."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ConfigError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"label outside [0,{k}): {labels}")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    probs = ad.softmax(logits)
    # row-sum of probs*onehot (the true-class probability) via mean * K
    p_true = ad.scalar_mul(ad.mean(ad.mul(probs, ad.Tensor(onehot)), axis=-1),
                           float(k))
    return ad.scalar_mul(ad.mean(ad.log(p_true)), -1.0)


def reconstruction_loss(target: np.ndarray, recon, plan: MaskPlan,
                        patch_size: int) -> ad.Tensor:
    """Masked-region MSE between two (B,T,C,H,W) tensors.

    The squared error is summed over masked patches only, then divided
    by (total masked patches) * (pixels per patch): a unit error on one
    masked pixel contributes 1/patch_dim, and visible patches contribute
    nothing at all (their gradient is exactly zero).
    """
    target = np.asarray(target, dtype=np.float64)
    recon = ad.as_tensor(recon)
    if target.shape != recon.shape:
        raise ConfigError(f"reconstruction target {target.shape} vs recon "
                          f"{recon.shape}")
    if plan.masked_count == 0:
        return ad.Tensor(0.0)
    target_tokens = patchify_tokens(target, patch_size)
    if plan.total != target_tokens.shape[1] or plan.batch != target.shape[0]:
        raise ConfigError(f"mask plan {plan.batch}x{plan.total} does not "
                          f"match tensor {target.shape} with p={patch_size}")
    masked_target = np.take_along_axis(target_tokens,
                                       plan.masked[:, :, None], axis=1)
    recon_tokens = patchify_tokens(recon, patch_size)
    masked_pred = ad.index_gather(recon_tokens, plan.masked)
    diff = ad.sub(masked_pred, ad.Tensor(masked_target))
    patch_dim = target_tokens.shape[2]
    scale = 1.0 / (plan.batch * plan.masked_count * patch_dim)
    return ad.scalar_mul(ad.sum_of_squares(diff), scale)


def joint_loss(l_cls, l_rec, lam: float):
    """Convex combination lam * l_cls + (1 - lam) * l_rec.

    Evaluated as l_rec + lam * (l_cls - l_rec) so the lam boundaries
    reduce exactly to the single losses (and 0.1/0.9 mixes round the
    intuitive way). Works on floats and on graph tensors alike.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0,1], got {lam}")
    if isinstance(l_cls, ad.Tensor) or isinstance(l_rec, ad.Tensor):
        l_cls, l_rec = ad.as_tensor(l_cls), ad.as_tensor(l_rec)
        if lam == 0.0:
            return l_rec
        if lam == 1.0:
            return l_cls
        return ad.add(ad.scalar_mul(ad.sub(l_cls, l_rec), lam), l_rec)
    if lam == 0.0:
        return l_rec
    if lam == 1.0:
        return l_cls
    return l_rec + lam * (l_cls - l_rec)


def cosine_lr(step: int, total_steps: int, lr_max: float,
              lr_min: float) -> float:
    """Cosine decay from lr_max (step 0) to lr_min (step == total_steps)."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(
        math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class SgdState:
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float,
             state: SgdState) -> dict:
    """Decoupled weight decay (p -= lr*wd*p, 1-D tensors exempt) followed
    by a momentum-SGD update. Returns the new parameter dict; ``state``
    velocities update in place."""
    new_params = {}
    for name, p in params.items():
        arr = p.array
        if grads and name in grads:
            g = grads[name]
            g = g.array if isinstance(g, ad.Tensor) else np.asarray(g)
            if g.shape != arr.shape:
                raise ConfigError(f"grad shape {g.shape} vs param {name} "
                                  f"{arr.shape}")
        else:
            g = np.zeros_like(arr)
        if weight_decay and arr.ndim > 1:
            arr = arr * (1.0 - lr * weight_decay)
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        new_params[name] = ad.Tensor(arr - lr * v, requires_grad=True)
    return new_params


# ---------------------------------------------------------------------------
# training

def _stream_rng(seed, epoch, step, stream):
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(seed, epoch, step, stream))))


def modality_tensors(images: np.ndarray, triplet: ConfigurationTriplet,
                     ldp_k: int) -> dict:
    """RGB plus (only when the triplet touches it) the LDP tensor."""
    out = {RGB: np.asarray(images, dtype=np.float64)}
    if triplet.needs_ldp():
        out[LDP] = ldp_tensor(out[RGB], k=ldp_k)
    return out


def forward_losses(model: Model, images: np.ndarray, labels,
                   config: ExperimentConfig, plan: MaskPlan,
                   epoch: int = 0, step: int = 0, train: bool = True):
    """Both streams per the configuration triplet; returns scalar tensors
    (joint, classification, reconstruction)."""
    triplet = config.triplet
    tensors = modality_tensors(images, triplet, config.ldp_k)
    p = config.patch_size
    seed = config.seed

    cls_tokens = patchify_tokens(tensors[triplet.classify], p)
    latent_cls = model.encode(cls_tokens, train=train,
                              rng=_stream_rng(seed, epoch, step, 1))
    l_cls = classification_loss(model.classify(latent_cls), labels)

    mask_tokens = patchify_tokens(tensors[triplet.mask], p)
    vis_tokens = np.take_along_axis(mask_tokens, plan.visible[:, :, None],
                                    axis=1)
    latent_rec = model.encode(vis_tokens, visible_idx=plan.visible,
                              train=train, stream="masked",
                              rng=_stream_rng(seed, epoch, step, 2))
    recon = model.decode_reconstruct(latent_rec, plan, train=train,
                                     rng=_stream_rng(seed, epoch, step, 3))
    per_target = [reconstruction_loss(tensors[m], recon, plan, p)
                  for m in triplet.reconstruct]
    l_rec = per_target[0]
    for extra in per_target[1:]:
        l_rec = ad.add(l_rec, extra)
    if len(per_target) > 1:
        l_rec = ad.scalar_mul(l_rec, 1.0 / len(per_target))

    return joint_loss(l_cls, l_rec, config.loss_lambda), l_cls, l_rec


def train_step(model: Model, images: np.ndarray, labels,
               config: ExperimentConfig, opt_state: SgdState, lr: float,
               epoch: int, step: int) -> dict:
    """One optimizer step on one batch. Returns the loss breakdown."""
    b = images.shape[0]
    plan = sample_mask(b, model.token_total, config.mask_ratio,
                       seed=config.seed, epoch=epoch, step=step)
    with ad.ComputeGraph() as graph:
        total, l_cls, l_rec = forward_losses(model, images, labels, config,
                                             plan, epoch=epoch, step=step)
    losses = {"total": float(total.array),
              "classification": float(l_cls.array),
              "reconstruction": float(l_rec.array)}
    if not all(math.isfinite(v) for v in losses.values()):
        raise NumericFailure(f"non-finite loss at epoch {epoch} step {step}: "
                             f"{losses}")
    grads = ad.backward(graph, total)
    by_name = {name: grads[p] for name, p in model.params.items()
               if p in grads}
    model.params = sgd_step(model.params, by_name, lr, config.weight_decay,
                            opt_state)
    return losses


def iter_batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_model(model: Model, dataset: Dataset, config: ExperimentConfig):
    """Eval-mode classification pass over a dataset; returns the metric
    bundle (average accuracy, per-class map, roc points, auc)."""
    triplet = config.triplet
    scores = []
    for idx in iter_batches(len(dataset), config.batch_size):
        tensors = modality_tensors(dataset.images[idx], triplet, config.ldp_k)
        tokens = patchify_tokens(tensors[triplet.classify], config.patch_size)
        logits = model.classify(model.encode(tokens, train=False))
        scores.append(ad.softmax(logits).array)
    scores = np.concatenate(scores)
    preds = scores.argmax(axis=1)
    avg, per_class = accuracy(preds, dataset.labels)
    roc_points, auc_value = score_roc_auc(scores, dataset.labels)
    return avg, per_class, roc_points, auc_value


def run_experiment(config: ExperimentConfig, splits) -> tuple[RunReport, Model]:
    """Train on the train split for the configured epochs, then evaluate
    on the test split. Deterministic given the config (incl. seed)."""
    train_ds, val_ds, test_ds = splits
    for name, ds in (("train", train_ds), ("test", test_ds)):
        if len(ds) == 0:
            raise ConfigError(f"{name} split is empty")
    if train_ds.num_classes != config.num_classes:
        raise ConfigError(f"dataset has {train_ds.num_classes} classes, "
                          f"config says {config.num_classes}")
    started = time.perf_counter()
    model = config.build_model()
    opt_state = SgdState()
    n = len(train_ds)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    losses = {}
    global_step = 0
    for epoch in range(config.epochs):
        order = _stream_rng(config.seed, epoch, 0, 0xD5).permutation(n)
        for step, idx in enumerate(iter_batches(n, config.batch_size, order)):
            lr = cosine_lr(global_step, total_steps, config.lr_max,
                           config.lr_min)
            losses = train_step(model, train_ds.images[idx],
                                train_ds.labels[idx], config, opt_state, lr,
                                epoch=epoch, step=step)
            global_step += 1
    avg, per_class, roc_points, auc_value = evaluate_model(model, test_ds,
                                                           config)
    report = RunReport(config=config.to_dict(),
                       per_class_accuracy=per_class,
                       average_accuracy=avg,
                       roc_points=[tuple(p) for p in np.asarray(roc_points)],
                       auc=auc_value,
                       final_losses=losses,
                       wall_clock_seconds=time.perf_counter() - started,
                       seed=config.seed).validate()
    return report, model


# ---------------------------------------------------------------------------
# sweeps

def cell_seed(base_seed: int, triplet_index: int, preset_index: int) -> int:
    """Deterministic per-cell seed for sweep grids."""
    seq = np.random.SeedSequence(entropy=(base_seed, triplet_index,
                                          preset_index))
    return int(seq.generate_state(1)[0])


def _run_cell(args):
    config_dict, splits = args
    config = ExperimentConfig.from_dict(config_dict)
    report, _ = run_experiment(config, splits)
    return config_dict["triplet"], config_dict["preset"], report


def run_sweep(base_config: ExperimentConfig, presets, splits, seed: int,
              jobs: int = 1) -> SweepGrid:
    """Every standard triplet x requested preset, each trained and
    evaluated on the same splits with a deterministic per-cell seed."""
    triplets = standard_triplets()
    grid = SweepGrid(triplets=[t.name for t in triplets],
                     presets=list(presets))
    tasks = []
    for pi, preset in enumerate(presets):
        for ti, triplet in enumerate(triplets):
            d = base_config.to_dict()
            d.update(triplet=triplet.name, preset=preset,
                     seed=cell_seed(seed, ti, pi))
            tasks.append((d, splits))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    for triplet_name, preset_name, report in results:
        grid.put(triplet_name, preset_name, report)
    return grid
