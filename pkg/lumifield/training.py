"""Fitting a radiance field grid to HDR multi-view images.

The loss per ray is the HDR regularized color loss of the coarse and the fine
pass plus the squared alpha error of the fine pass. Coarse and fine passes
share one grid: the coarse pass marches the stratified samples only, the fine
pass marches their union with samples drawn from the coarse weights.

Gradients are computed analytically in reverse mode through the marching
quadrature, the SH decode, the activations and the loss terms. Sample
positions are treated as constants (see SamplePlan).
"""

import collections
import csv
import dataclasses
import logging
import struct

import numpy as np
from tqdm import tqdm

from lumifield import dataio
from lumifield import field
from lumifield import geometry
from lumifield import parallel
from lumifield import raymarch
from lumifield import shmath
from lumifield.errors import ConfigError, FormatError, TrainingDiverged

logger = logging.getLogger(__name__)

LOSS_HDR = "hdr"
LOSS_MSE = "mse"
LOSS_EXP = "exp"
COLOR_LOSSES = (LOSS_HDR, LOSS_MSE, LOSS_EXP)

LossTerms = collections.namedtuple("LossTerms",
                                   ["coarse", "fine", "alpha", "total"])
HistoryRow = collections.namedtuple(
    "HistoryRow", ["iteration", "coarse", "fine", "alpha", "total", "lr"])
SamplePlan = collections.namedtuple("SamplePlan", ["coarse_t", "fine_t"])
FitResult = collections.namedtuple("FitResult", ["grid", "history"])


@dataclasses.dataclass(frozen=True)
class LossConfig:
    """Loss hyper parameters.

    Attributes:
        lam: regularizer scale, the maximum scene radiance of the dataset.
        eps: regularizer offset.
        term_weights: weights of the (coarse, fine, alpha) terms.
        color_loss: "hdr" (regularized), "mse" (plain) or "exp"
            (residual scaled by exp(-beta * pred)).
        beta: decay rate of the "exp" regularizer.
        denominator_gradient: let gradients flow through the regularizer.
    """

    lam: float = 1.0
    eps: float = 0.01
    term_weights: tuple = (1.0, 1.0, 1.0)
    color_loss: str = LOSS_HDR
    beta: float = 1.0
    denominator_gradient: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if len(self.term_weights) != 3 or min(self.term_weights) < 0:
            raise ConfigError("term weights must be three non negative values")
        if self.color_loss not in COLOR_LOSSES:
            raise ConfigError("unknown color loss {!r}".format(self.color_loss))


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimization settings."""

    batch_rays: int = 1024
    n_coarse: int = 64
    n_fine: int = 128
    lr_start: float = 5e-4
    lr_end: float = 5e-6
    iterations: int = 1000
    seed: int = 0
    model: str = raymarch.LINEAR
    activation: str = shmath.ExtendedSigmoid.name
    max_radiance: float = 1.0
    logsig_eps: float = 1e-6
    jitter: bool = True
    log_every: int = 100
    chunk_rays: int = 256

    def __post_init__(self):
        if self.batch_rays < 1:
            raise ConfigError("batch_rays must be >= 1")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ConfigError("need n_coarse >= 1 and n_fine >= 0")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be non negative")
        if self.model not in raymarch.TRANSMITTANCE_MODELS:
            raise ConfigError("unknown transmittance model {!r}".format(
                self.model))

    def make_activation(self):
        try:
            return shmath.make_activation(self.activation, self.max_radiance,
                                          self.logsig_eps)
        except ValueError as error:
            raise ConfigError(str(error))


class RayBatch:
    """Rays with ground truth radiance and alpha."""

    def __init__(self, rays, gt_radiance, gt_alpha):
        self.rays = rays
        self.gt_radiance = np.asarray(gt_radiance, dtype=np.float64)
        self.gt_alpha = np.asarray(gt_alpha, dtype=np.float64)
        if (self.gt_radiance.shape != (len(rays), 3)
                or self.gt_alpha.shape != (len(rays),)):
            raise ValueError("ground truth does not match the ray count")
        if np.any(self.gt_radiance < 0):
            raise ValueError("ground truth radiance must be non negative")
        if np.any((self.gt_alpha < 0) | (self.gt_alpha > 1)):
            raise ValueError("ground truth alpha must be in [0, 1]")

    def __len__(self):
        return len(self.rays)

    def __getitem__(self, index):
        return RayBatch(self.rays[index], self.gt_radiance[index],
                        self.gt_alpha[index])


class RaySupplier:
    """All training rays; batches are drawn without replacement per epoch."""

    def __init__(self, rays, gt_radiance, gt_alpha):
        self.data = RayBatch(rays, gt_radiance, gt_alpha)
        if not len(self.data):
            raise ValueError("ray supplier needs at least one ray")
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0
        self.epoch = 0

    @classmethod
    def from_dataset(cls, root, split=dataio.TRAIN):
        """Rays of a dataset split clipped to the dataset bounding box."""
        manifest = dataio.load_manifest(root)
        views = dataio.load_split(root, split, manifest)
        if not views:
            raise ValueError("split {!r} of {} has no views".format(split, root))
        proxy = geometry.Box(*manifest.bbox)
        rays, radiance, alpha = [], [], []
        for view in views:
            view_rays = raymarch.clip_to_proxy(
                dataio.generate_rays(view.camera), proxy)
            rays.append(view_rays)
            radiance.append(np.maximum(view.rgb.reshape(-1, 3), 0.0))
            alpha.append(np.clip(view.alpha.reshape(-1), 0.0, 1.0))
        merged = raymarch.Rays(
            np.concatenate([r.origins for r in rays]),
            np.concatenate([r.dirs for r in rays]),
            np.concatenate([r.t_near for r in rays]),
            np.concatenate([r.t_far for r in rays]))
        logger.info("Loaded %d rays from %d %s views", len(merged), len(views),
                    split)
        return cls(merged, np.concatenate(radiance), np.concatenate(alpha))

    def __len__(self):
        return len(self.data)

    def next_batch(self, rng, size):
        picked = []
        needed = size
        while needed > 0:
            if self._cursor >= len(self._order):
                self._order = rng.permutation(len(self.data))
                self._cursor = 0
                self.epoch += 1
            take = self._order[self._cursor:self._cursor + needed]
            self._cursor += len(take)
            needed -= len(take)
            picked.append(take)
        return self.data[np.concatenate(picked)]


def _hdr_residual(pred, gt, cfg):
    denom = shmath.reinhard_weight(pred, cfg.lam, cfg.eps)
    residual = (pred - gt) / denom
    if cfg.denominator_gradient:
        slope = (cfg.lam * gt + cfg.eps) / denom ** 2
    else:
        slope = 1.0 / denom
    return residual, slope


def _color_residual(pred, gt, cfg):
    """Residual r with loss sum(r ** 2) and its derivative dr / dpred."""
    if cfg.color_loss == LOSS_HDR:
        return _hdr_residual(pred, gt, cfg)
    diff = pred - gt
    if cfg.color_loss == LOSS_MSE:
        return diff, np.ones_like(diff)
    scale = np.exp(-cfg.beta * pred)
    if cfg.denominator_gradient:
        return diff * scale, scale * (1.0 - cfg.beta * diff)
    return diff * scale, scale


def hdr_color_loss(pred, gt, cfg):
    """Sum over channels of ((pred - gt) / (lam * pred + eps)) ** 2."""
    residual, _ = _hdr_residual(np.asarray(pred, dtype=np.float64),
                                np.asarray(gt, dtype=np.float64), cfg)
    return np.sum(residual ** 2, axis=-1)


def color_loss(pred, gt, cfg):
    """Color loss selected by cfg.color_loss, summed over channels."""
    residual, _ = _color_residual(np.asarray(pred, dtype=np.float64),
                                  np.asarray(gt, dtype=np.float64), cfg)
    return np.sum(residual ** 2, axis=-1)


def alpha_loss(pred_alpha, gt_alpha):
    return (np.asarray(pred_alpha, dtype=np.float64) - gt_alpha) ** 2


class _Pass:
    """Forward quantities of one marching pass kept for the backward pass."""

    # pylint: disable=too-many-instance-attributes
    # plain record of cached arrays

    def __init__(self, grid, rays, t_vals, act, model):
        self.deltas = raymarch.sample_deltas(t_vals, rays.t_near, rays.t_far)
        self.indices, self.blend = grid.stencil(rays.at(t_vals))
        logits = grid.density.reshape(-1)[self.indices]
        self.density_slope = grid.density_derivative(logits)
        self.sigma = np.sum(self.blend * grid.activate_density(logits), axis=-1)

        sh_flat = grid.sh.reshape(grid.n_voxels, 3, -1)
        coeffs = np.zeros(self.sigma.shape + sh_flat.shape[1:])
        for corner in range(self.indices.shape[-1]):
            coeffs += (self.blend[..., corner, None, None]
                       * sh_flat[self.indices[..., corner]])
        self.basis = shmath.sh_basis(grid.l_max, rays.dirs)
        self.logits = np.einsum("nsck,nk->nsc", coeffs, self.basis)
        self.emitted = act(self.logits)
        self.acc = raymarch.accumulate(self.sigma, self.deltas, model)
        self.radiance = np.einsum("ns,nsc->nc", self.acc.emission_weights,
                                  self.emitted)
        self.alpha = 1.0 - self.acc.transmittance[:, -1]

    def backward(self, grid, act, model, d_radiance, d_alpha, grads):
        """Accumulate parameter gradients into grads."""
        trans = self.acc.transmittance
        optical = self.sigma * self.deltas
        g = np.einsum("nc,nsc->ns", d_radiance, self.emitted)
        if model == raymarch.LINEAR:
            t_in = trans[:, :-1]
            depth = np.concatenate([np.zeros((len(optical), 1)),
                                    np.cumsum(optical, axis=1)], axis=1)
            unsaturated = optical < t_in
            de_dt = np.where(unsaturated, optical, t_in)
            de_db = np.where(unsaturated, t_in - optical, 0.0)
            through = g * de_dt * (depth[:, :-1] < 1.0)
            later = through.sum(axis=1, keepdims=True) - np.cumsum(through,
                                                                   axis=1)
            opaque_slope = (depth[:, -1] < 1.0).astype(np.float64)
            d_optical = (g * de_db - later
                         + (d_alpha * opaque_slope)[:, None])
        else:
            through = g * self.acc.weights
            later = through.sum(axis=1, keepdims=True) - np.cumsum(through,
                                                                   axis=1)
            d_optical = (g * trans[:, 1:] - later
                         + (d_alpha * trans[:, -1])[:, None])
        d_sigma = d_optical * self.deltas

        density_weights = d_sigma[..., None] * self.blend * self.density_slope
        grads["density"] += np.bincount(
            self.indices.reshape(-1), density_weights.reshape(-1),
            minlength=grid.n_voxels).reshape(grid.resolution)

        d_emitted = d_radiance[:, None, :] * self.acc.emission_weights[..., None]
        d_logits = d_emitted * act.derivative(self.logits)
        d_coeffs = d_logits[..., None] * self.basis[:, None, None, :]
        width = d_coeffs.shape[-2] * d_coeffs.shape[-1]
        offsets = np.arange(width)
        sh_grad = np.zeros(grid.n_voxels * width)
        for corner in range(self.indices.shape[-1]):
            flat = self.indices[..., corner, None] * width + offsets
            contrib = self.blend[..., corner, None] * d_coeffs.reshape(
                d_coeffs.shape[:2] + (width,))
            sh_grad += np.bincount(flat.reshape(-1), contrib.reshape(-1),
                                   minlength=grid.n_voxels * width)
        grads["sh"] += sh_grad.reshape(grid.sh.shape)


def plan_samples(batch, grid, tcfg, rng=None):
    """Coarse and fine sample distances of a batch.

    Coarse samples are stratified (jittered when tcfg.jitter and an rng is
    given); fine samples are the union of the coarse samples with n_fine
    distances resampled from the coarse opacity weights.
    """
    rays = batch.rays
    jitter_rng = rng if tcfg.jitter else None
    coarse_t = raymarch.stratified_samples(rays.t_near, rays.t_far,
                                           tcfg.n_coarse, jitter_rng)
    if tcfg.n_fine == 0:
        return SamplePlan(coarse_t, coarse_t)
    coarse = raymarch.march_samples(rays, grid, coarse_t,
                                    tcfg.make_activation(), tcfg.model)
    fine_t = raymarch.fine_samples(coarse_t, coarse.weights, rays, tcfg.n_fine,
                                   rng)
    return SamplePlan(coarse_t, fine_t)


def _chunk_loss_and_gradient(batch, grid, cfg, tcfg, plan, total_rays,
                             want_gradient):
    act = tcfg.make_activation()
    w_coarse, w_fine, w_alpha = cfg.term_weights
    coarse = _Pass(grid, batch.rays, plan.coarse_t, act, tcfg.model)
    fine = _Pass(grid, batch.rays, plan.fine_t, act, tcfg.model)

    r_coarse, s_coarse = _color_residual(coarse.radiance, batch.gt_radiance, cfg)
    r_fine, s_fine = _color_residual(fine.radiance, batch.gt_radiance, cfg)
    loss_coarse = np.sum(r_coarse ** 2, axis=-1)
    loss_fine = np.sum(r_fine ** 2, axis=-1)
    loss_alpha = alpha_loss(fine.alpha, batch.gt_alpha)
    sums = np.array([loss_coarse.sum(), loss_fine.sum(), loss_alpha.sum(),
                     np.sum(w_coarse * loss_coarse + w_fine * loss_fine
                            + w_alpha * loss_alpha)])
    if not want_gradient:
        return sums, None

    grads = {"density": np.zeros(grid.density.shape),
             "sh": np.zeros(grid.sh.shape)}
    scale = 1.0 / total_rays
    coarse.backward(grid, act, tcfg.model,
                    scale * w_coarse * 2.0 * r_coarse * s_coarse,
                    np.zeros(len(batch)), grads)
    fine.backward(grid, act, tcfg.model,
                  scale * w_fine * 2.0 * r_fine * s_fine,
                  scale * w_alpha * 2.0 * (fine.alpha - batch.gt_alpha), grads)
    return sums, grads


def _evaluate(batch, grid, cfg, tcfg, plan, threads, want_gradient):
    if plan is None:
        plan = plan_samples(batch, grid, tcfg)
    slices = parallel.chunk_slices(len(batch), tcfg.chunk_rays)

    def work(part):
        return _chunk_loss_and_gradient(
            batch[part], grid, cfg, tcfg,
            SamplePlan(plan.coarse_t[part], plan.fine_t[part]), len(batch),
            want_gradient)

    results = parallel.ordered_map(work, slices, threads)
    sums = np.zeros(4)
    grads = ({"density": np.zeros(grid.density.shape),
              "sh": np.zeros(grid.sh.shape)} if want_gradient else None)
    for chunk_sums, chunk_grads in results:
        sums += chunk_sums
        if want_gradient:
            for name in grads:
                grads[name] += chunk_grads[name]
    terms = LossTerms(*(sums / len(batch)))
    return terms, grads


def batch_loss(batch, grid, cfg, tcfg, plan=None, threads=None):
    """Mean loss terms of a batch.

    Args:
        batch: RayBatch.
        grid: RadianceFieldGrid.
        cfg: LossConfig.
        tcfg: TrainConfig.
        plan: SamplePlan; deterministic midpoint sampling when None.
        threads: worker cap.

    Returns:
        LossTerms of per ray means; total uses cfg.term_weights.
    """
    terms, _ = _evaluate(batch, grid, cfg, tcfg, plan, threads, False)
    return terms


def loss_and_gradient(batch, grid, cfg, tcfg, plan=None, threads=None):
    """Loss terms and gradients of the total loss.

    Returns:
        (gradients, LossTerms) where gradients maps "density" and "sh" to
        arrays shaped like the grid parameters.
    """
    terms, grads = _evaluate(batch, grid, cfg, tcfg, plan, threads, True)
    return grads, terms


def batch_gradient(batch, grid, cfg, tcfg, plan=None, threads=None):
    """Gradients of the total batch loss with respect to the grid logits."""
    grads, _ = loss_and_gradient(batch, grid, cfg, tcfg, plan, threads)
    return grads


def lr_schedule(iteration, tcfg):
    """Exponential decay from lr_start at 0 to lr_end at tcfg.iterations."""
    if iteration <= 0 or tcfg.iterations == 0:
        return tcfg.lr_start
    if iteration >= tcfg.iterations:
        return tcfg.lr_end
    ratio = tcfg.lr_end / tcfg.lr_start
    return tcfg.lr_start * ratio ** (iteration / tcfg.iterations)


class Adam:
    """Adam optimizer over a dict of parameter arrays updated in place."""

    def __init__(self, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = lr / bc1
        for name, param in params.items():
            grad = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)
            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * grad
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (grad * grad)
            denom = np.sqrt(self.v[name] / bc2) + self.epsilon
            param -= step_size * self.m[name] / denom


_OPTIMIZER_HEADER = struct.Struct("<6sIQ3d")
OPTIMIZER_MAGIC = b"LFADAM"
OPTIMIZER_VERSION = 1


def save_checkpoint(path, grid, optimizer):
    """Grid followed by the Adam state block."""
    with open(path, "wb") as handle:
        field.write_grid(handle, grid)
        handle.write(_OPTIMIZER_HEADER.pack(
            OPTIMIZER_MAGIC, OPTIMIZER_VERSION, optimizer.t, optimizer.beta1,
            optimizer.beta2, optimizer.epsilon))
        for name, param in grid.parameters().items():
            for state in (optimizer.m, optimizer.v):
                values = state.get(name, np.zeros_like(param))
                handle.write(values.astype("<f8").tobytes())
    logger.info("Saved checkpoint at step %d to %s", optimizer.t, path)


def load_checkpoint(path):
    """Read (grid, Adam) written by save_checkpoint."""
    with open(path, "rb") as handle:
        grid = field.read_grid(handle)
        header = handle.read(_OPTIMIZER_HEADER.size)
        if len(header) != _OPTIMIZER_HEADER.size:
            raise FormatError("checkpoint has no optimizer block")
        magic, version, step, beta1, beta2, epsilon = \
            _OPTIMIZER_HEADER.unpack(header)
        if magic != OPTIMIZER_MAGIC or version != OPTIMIZER_VERSION:
            raise FormatError("unsupported optimizer block in {}".format(path))
        optimizer = Adam(beta1, beta2, epsilon)
        optimizer.t = step
        for name, param in grid.parameters().items():
            for state in (optimizer.m, optimizer.v):
                size = param.size * 8
                data = handle.read(size)
                if len(data) != size:
                    raise FormatError("truncated optimizer state")
                state[name] = np.frombuffer(data, dtype="<f8").reshape(
                    param.shape).copy()
    return grid, optimizer


def _finite(terms, grads):
    return (np.isfinite(terms.total)
            and all(np.all(np.isfinite(g)) for g in grads.values()))


def fit(dataset, grid, cfg, tcfg, callbacks=None, threads=None,
        optimizer=None, snapshot_path=None, progress=False):
    """Fit the grid in place with Adam and exponential learning rate decay.

    Args:
        dataset: RaySupplier.
        grid: RadianceFieldGrid, updated in place.
        cfg: LossConfig.
        tcfg: TrainConfig.
        callbacks: optional observable.Observable; receives "iteration"
            (HistoryRow) and "finished" (grid, history) events.
        threads: worker cap for gradient evaluation.
        optimizer: Adam to resume from; iterations continue at its step.
        snapshot_path: where to write a checkpoint if the loss diverges.
        progress: show a progress bar.

    Returns:
        FitResult(grid, history).

    Raises:
        TrainingDiverged: on a non finite loss or gradient.
    """
    if not len(dataset):
        raise ValueError("dataset is empty")
    optimizer = optimizer or Adam()
    start = optimizer.t
    rng = np.random.default_rng([tcfg.seed, start])
    history = []
    last_terms = None
    logger.info("Fitting %s for %d iterations", grid, tcfg.iterations - start)
    for iteration in tqdm(range(start, tcfg.iterations), disable=not progress,
                          desc="fit"):
        lr = lr_schedule(iteration, tcfg)
        batch = dataset.next_batch(rng, tcfg.batch_rays)
        plan = plan_samples(batch, grid, tcfg, rng)
        grads, terms = loss_and_gradient(batch, grid, cfg, tcfg, plan, threads)
        if not _finite(terms, grads):
            snapshot = None
            if snapshot_path:
                save_checkpoint(snapshot_path, grid, optimizer)
                snapshot = snapshot_path
            logger.error("Non finite loss at iteration %d: %s", iteration,
                         terms)
            raise TrainingDiverged(iteration, last_terms, snapshot)
        optimizer.step(grid.parameters(), grads, lr)
        row = HistoryRow(iteration, *terms, lr)
        history.append(row)
        last_terms = terms
        if tcfg.log_every and iteration % tcfg.log_every == 0:
            logger.info("iteration %d total %.6g (coarse %.6g fine %.6g "
                        "alpha %.6g) lr %.3g", iteration, terms.total,
                        terms.coarse, terms.fine, terms.alpha, lr)
        if callbacks is not None:
            callbacks.trigger("iteration", row)
    if callbacks is not None:
        callbacks.trigger("finished", grid, history)
    return FitResult(grid, history)


def write_history(path, history):
    """Loss history as CSV with iteration, coarse, fine, alpha, total, lr."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(HistoryRow._fields)
        for row in history:
            writer.writerow([row.iteration] + ["{:.9g}".format(v)
                                               for v in row[1:]])
