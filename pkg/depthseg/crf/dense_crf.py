"""Fully connected CRF over pixels with appearance, depth and smoothness kernels.

The pairwise kernel between pixels i and j is::

    k(i, j) = w1 exp(-|p_i - p_j|² / 2θα² - |I_i - I_j|² / 2θβ²)
            + w2 exp(-|p_i - p_j|² / 2θα² - |d_i - d_j|² / 2θγ²)
            + w3 exp(-|p_i - p_j|² / 2θs²)

with Potts compatibility and θs = θα unless ``theta_smooth`` is set. Under Potts the
mean-field update reduces to ``Q ∝ exp(-U + Σ_j k(i, j) Q_j)``.
"""

from __future__ import annotations

import functools
import itertools
import logging
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial.distance import cdist
from scipy.special import softmax

from depthseg.exceptions import ShapeMismatchError
from depthseg.schemas.config_schema import CrfParams
from depthseg.schemas.sample_schema import DepthMap, LabelMap, ProbabilityMap

logger = logging.getLogger("depthseg")

PROB_CLAMP = 1e-8
_CHUNK_ELEMENTS = 2_000_000
# blur taps reach this many standard deviations
TRUNCATE = 4.0
MAX_LATTICE_STEP = float(np.sqrt(3.0))
MIN_SPLAT_WEIGHT = 1e-12

UnaryField = np.ndarray


def compute_unary(prob) -> UnaryField:
    """−log of the class probabilities, clamped to [1e-8, 1] first."""
    probs = prob.probs if isinstance(prob, ProbabilityMap) else np.asarray(prob, dtype=np.float64)
    return -np.log(np.clip(probs, PROB_CLAMP, 1.0))


def kernel_between(p_i, p_j, intensity_i, intensity_j, depth_i, depth_j, params: CrfParams) -> float:
    """Kernel value from raw features; ``depth_i``/``depth_j`` may be None to drop the depth term."""
    p_i, p_j = np.asarray(p_i, dtype=np.float64), np.asarray(p_j, dtype=np.float64)
    position = float(np.sum((p_i - p_j) ** 2))
    colour = float(np.sum((np.asarray(intensity_i, dtype=np.float64) - np.asarray(intensity_j, dtype=np.float64)) ** 2))
    alpha2 = 2 * params.theta_alpha**2
    value = params.w1 * np.exp(-position / alpha2 - colour / (2 * params.theta_beta**2))
    if depth_i is not None and depth_j is not None:
        value += params.w2 * np.exp(-position / alpha2 - (float(depth_i) - float(depth_j)) ** 2 / (2 * params.theta_gamma**2))
    value += params.w3 * np.exp(-position / (2 * params.smooth_bandwidth**2))
    return float(value)


def pairwise_kernel(i: Tuple[int, int], j: Tuple[int, int], image: np.ndarray, depth: Optional[np.ndarray], params: CrfParams) -> float:
    """Kernel between pixels ``i`` and ``j`` given as (row, col)."""
    depth_values = depth.values if isinstance(depth, DepthMap) else depth
    return kernel_between(
        i,
        j,
        image[i[0], i[1]],
        image[j[0], j[1]],
        None if depth_values is None else depth_values[i[0], i[1]],
        None if depth_values is None else depth_values[j[0], j[1]],
        params,
    )


def _positions(height: int, width: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)


def appearance_features(image: np.ndarray) -> np.ndarray:
    height, width = image.shape[:2]
    return np.concatenate([_positions(height, width), image.reshape(height * width, -1).astype(np.float64)], axis=1)


def depth_features(depth: np.ndarray) -> np.ndarray:
    height, width = depth.shape
    return np.concatenate([_positions(height, width), depth.reshape(-1, 1).astype(np.float64)], axis=1)


def _chunk_rows(n_rows: int, n_cols: int) -> int:
    return max(1, _CHUNK_ELEMENTS // max(1, n_cols))


def brute_force_message_pass(Q: np.ndarray, features: np.ndarray, bandwidths) -> np.ndarray:
    """Exact Σ_{j≠i} exp(-½|f_i - f_j|²) Q_j with features scaled by ``bandwidths``."""
    scaled = np.asarray(features, dtype=np.float64) / np.asarray(bandwidths, dtype=np.float64)
    n = scaled.shape[0]
    out = np.empty_like(Q, dtype=np.float64)
    step = _chunk_rows(n, n)
    for start in range(0, n, step):
        stop = min(n, start + step)
        weights = np.exp(-0.5 * cdist(scaled[start:stop], scaled, "sqeuclidean"))
        weights[np.arange(stop - start), np.arange(start, stop)] = 0.0
        out[start:stop] = weights @ Q
    return out


class GaussianLattice:
    """Sparse regular lattice over bandwidth-scaled features.

    Each pixel is splatted multilinearly onto the corners of its lattice cell, the
    vertex values are blurred by a sampled 1-D Gaussian along one axis at a time, and
    the result is sliced back with the splat weights. The two interpolations add a
    variance of ``lattice_step²/6`` each on average, so the blur variance is reduced
    by that amount. Each pixel also carries an amplitude factor that undoes the peak
    loss of its own interpolation, which keeps the filter second order in the spacing.

    A blur pass only materialises lattice points whose leading coordinates belong to
    an occupied vertex; every other point can never reach a vertex through the
    remaining passes. Within the truncation radius the result is the same as a blur
    over the full grid. The lattice is built once per feature set and reused by every
    mean-field iteration.
    """

    def __init__(self, features, bandwidths, lattice_step: float = 1.0, truncate: float = TRUNCATE):
        scaled = np.asarray(features, dtype=np.float64) / np.asarray(bandwidths, dtype=np.float64)
        if scaled.ndim != 2:
            raise ShapeMismatchError(f"features must be N×D, got shape {scaled.shape}")
        if not np.all(np.isfinite(scaled)):
            raise ValueError("message passing features must be finite")
        if not 0 < lattice_step < MAX_LATTICE_STEP:
            raise ValueError(f"lattice_step must lie in (0, {MAX_LATTICE_STEP:.4f}), got {lattice_step}")
        n, dims = scaled.shape
        self.n_pixels = n
        blur_std = np.sqrt(1.0 - lattice_step**2 / 3.0)
        radius = max(1, int(np.ceil(truncate * blur_std / lattice_step)))
        self.offsets = np.arange(-radius, radius + 1)
        self.taps = np.exp(-0.5 * (self.offsets * lattice_step / blur_std) ** 2)

        grid = scaled / lattice_step
        base = np.floor(grid).astype(np.int64)
        frac = grid - base
        # interpolation at offset f adds variance f(1-f)·step² and damps the peak by about half that
        amplitude = np.exp(np.sum(frac * (1.0 - frac), axis=1) * lattice_step**2 / (2.0 * blur_std**2))
        near = self.taps[radius + 1]
        self_overlap = np.prod((1.0 - frac) ** 2 + frac**2 + 2.0 * frac * (1.0 - frac) * near, axis=1)
        self.self_weight = amplitude**2 * self_overlap

        corners = np.array(list(itertools.product((0, 1), repeat=dims)), dtype=np.int64)
        weights = np.ones((n, corners.shape[0]))
        for k in range(dims):
            weights *= np.where(corners[:, k] == 1, frac[:, k, None], 1.0 - frac[:, k, None])
        pixel, corner = np.nonzero(weights > MIN_SPLAT_WEIGHT)
        splat_weights = weights[pixel, corner] * amplitude[pixel]
        coords = base[pixel] + corners[corner]

        # sparsest axes first keeps the intermediate point sets small
        distinct = [np.unique(coords[:, k]).size for k in range(dims)]
        coords = coords[:, np.argsort(distinct, kind="stable")]

        self.axis_values = []
        ranks = np.empty_like(coords)
        for k in range(dims):
            occupied = np.unique(coords[:, k])
            values = np.unique((occupied[:, None] + self.offsets[None, :]).ravel())
            self.axis_values.append(values)
            ranks[:, k] = np.searchsorted(values, coords[:, k])
        sizes = [values.size for values in self.axis_values]
        strides = [1] * dims
        for k in range(dims - 2, -1, -1):
            strides[k] = strides[k + 1] * sizes[k + 1]
        if strides[0] * sizes[0] >= 2**62:
            raise ValueError(f"lattice_step {lattice_step} is too fine for these features; use a coarser lattice")
        self.strides = np.array(strides, dtype=np.int64)

        vertex_codes, first, vertex_of = np.unique(ranks @ self.strides, return_index=True, return_inverse=True)
        vertex_ranks = ranks[first]
        self.n_vertices = vertex_codes.size
        self._splat = csr_matrix((splat_weights, (vertex_of.reshape(-1), pixel)), shape=(self.n_vertices, n))
        self._slice = self._splat.T.tocsr()

        self._passes = []
        points = vertex_ranks
        largest = points.shape[0]
        for axis in range(dims):
            prefixes = np.unique(vertex_ranks[:, : axis + 1] @ self.strides[: axis + 1])
            points, blur = self._blur_pass(points, axis, prefixes)
            self._passes.append(blur)
            largest = max(largest, points.shape[0])
        if points.shape[0] != self.n_vertices:
            raise RuntimeError(f"lattice blur ended on {points.shape[0]} points, expected {self.n_vertices} vertices")
        self.largest_pass = largest
        logger.debug(
            f"Gaussian lattice: {n} pixels, {self.n_vertices} vertices, up to {largest} points per pass "
            f"({dims}-D, step {lattice_step}, {self.offsets.size} taps)"
        )

    def _blur_pass(self, points: np.ndarray, axis: int, prefixes: np.ndarray):
        taps = self.offsets.size
        values = self.axis_values[axis]
        source = np.repeat(np.arange(points.shape[0]), taps)
        shifted = values[points[source, axis]] + np.tile(self.offsets, points.shape[0])
        rank = np.minimum(np.searchsorted(values, shifted), values.size - 1)
        keep = values[rank] == shifted

        candidates = points[source]
        candidates[:, axis] = rank
        prefix = candidates[:, : axis + 1] @ self.strides[: axis + 1]
        hit = np.minimum(np.searchsorted(prefixes, prefix), prefixes.size - 1)
        keep &= prefixes[hit] == prefix

        candidates, source = candidates[keep], source[keep]
        weight = np.tile(self.taps, points.shape[0])[keep]
        _, first, target = np.unique(candidates @ self.strides, return_index=True, return_inverse=True)
        blur = csr_matrix((weight, (target.reshape(-1), source)), shape=(first.size, points.shape[0]))
        return candidates[first], blur

    def filter(self, Q: np.ndarray) -> np.ndarray:
        """Σ_j k(i, j) Q_j including j = i."""
        values = self._splat @ Q
        for blur in self._passes:
            values = blur @ values
        return self._slice @ values

    def message(self, Q: np.ndarray) -> np.ndarray:
        """Σ_{j≠i} k(i, j) Q_j; the lattice's own self weight is removed per pixel."""
        return self.filter(Q) - self.self_weight[:, None] * Q


def fast_message_pass(Q: np.ndarray, features: np.ndarray, bandwidths, lattice_step: float = 1.0) -> np.ndarray:
    """Lattice approximation of ``brute_force_message_pass``."""
    return GaussianLattice(features, bandwidths, lattice_step).message(np.asarray(Q, dtype=np.float64))


def spatial_message_pass(Q_image: np.ndarray, bandwidth: float) -> np.ndarray:
    """Exact position-only Gaussian message, separable along rows and columns; H×W×C in and out."""
    height, width = Q_image.shape[:2]
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    g_rows = np.exp(-((rows[:, None] - rows[None, :]) ** 2) / (2 * bandwidth**2))
    g_cols = np.exp(-((cols[:, None] - cols[None, :]) ** 2) / (2 * bandwidth**2))
    along_rows = np.tensordot(g_rows, Q_image, axes=(1, 0))
    both = np.tensordot(along_rows, g_cols, axes=(1, 1)).transpose(0, 2, 1)
    return both - Q_image


def _check_shapes(unary: np.ndarray, image: np.ndarray, depth: Optional[np.ndarray]):
    if unary.ndim != 3:
        raise ShapeMismatchError(f"unary must be H×W×C, got shape {unary.shape}")
    if image.shape[:2] != unary.shape[:2]:
        raise ShapeMismatchError(f"image {image.shape[:2]} and unary {unary.shape[:2]} differ in size")
    if depth is not None and depth.shape != unary.shape[:2]:
        raise ShapeMismatchError(f"depth {depth.shape} and unary {unary.shape[:2]} differ in size")


def mean_field_refine(
    unary: UnaryField,
    image: np.ndarray,
    depth=None,
    params: Optional[CrfParams] = None,
    exact: bool = False,
    on_iteration: Optional[Callable[[int, np.ndarray], None]] = None,
) -> Tuple[ProbabilityMap, LabelMap]:
    """Synchronous mean-field inference.

    Args:
        unary: H×W×C negative log-probabilities
        image: H×W×3 intensities on the 0-255 scale
        depth: optional H×W depth map; without it the depth term is dropped
        params: kernel weights, bandwidths, iteration count
        exact: use the O(N²) message pass for every kernel
        on_iteration: called with (iteration, Q as H×W×C) after each update

    Returns:
        (refined Q, its argmax labeling)
    """
    params = params or CrfParams()
    unary = np.asarray(unary, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    depth_values = depth.values if isinstance(depth, DepthMap) else (None if depth is None else np.asarray(depth, dtype=np.float64))
    _check_shapes(unary, image, depth_values)

    height, width, classes = unary.shape
    U = unary.reshape(-1, classes)
    Q = softmax(-U, axis=1)

    if params.iterations > 0:
        app_features = appearance_features(image)
        app_bw = [params.theta_alpha] * 2 + [params.theta_beta] * (app_features.shape[1] - 2)
        use_depth = depth_values is not None and params.w2 > 0
        if use_depth:
            dep_features = depth_features(depth_values)
            dep_bw = [params.theta_alpha] * 2 + [params.theta_gamma]
        kernels = []
        if params.w1 > 0:
            kernels.append((params.w1, app_features, app_bw))
        if use_depth:
            kernels.append((params.w2, dep_features, dep_bw))
        if exact:
            passes = [(w, functools.partial(brute_force_message_pass, features=f, bandwidths=bw)) for w, f, bw in kernels]
            if params.w3 > 0:
                smooth = functools.partial(
                    brute_force_message_pass, features=_positions(height, width), bandwidths=[params.smooth_bandwidth] * 2
                )
                passes.append((params.w3, smooth))
        else:
            passes = [(w, GaussianLattice(f, bw, params.lattice_step).message) for w, f, bw in kernels]
            if params.w3 > 0:

                def smooth(q):
                    filtered = spatial_message_pass(q.reshape(height, width, classes), params.smooth_bandwidth)
                    return filtered.reshape(-1, classes)

                passes.append((params.w3, smooth))

        for iteration in range(params.iterations):
            pairwise = np.zeros_like(Q)
            for weight, message in passes:
                pairwise += weight * message(Q)
            Q = softmax(-U + pairwise, axis=1)
            if on_iteration is not None:
                on_iteration(iteration, Q.reshape(height, width, classes))

    Q_image = Q.reshape(height, width, classes)
    refined = ProbabilityMap(Q_image)
    return refined, refined.argmax()


def gibbs_energy(labels, unary: UnaryField, image: np.ndarray, depth=None, params: Optional[CrfParams] = None) -> float:
    """Exact Σ_i U_i(x_i) + Σ_{i<j} k(i, j) [x_i ≠ x_j]; limited to ``params.max_exact_pixels``."""
    params = params or CrfParams()
    labels = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    unary = np.asarray(unary, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    depth_values = depth.values if isinstance(depth, DepthMap) else (None if depth is None else np.asarray(depth, dtype=np.float64))
    _check_shapes(unary, image, depth_values)
    if labels.shape != unary.shape[:2]:
        raise ShapeMismatchError(f"labels {labels.shape} and unary {unary.shape[:2]} differ in size")
    height, width, classes = unary.shape
    n = height * width
    if n > params.max_exact_pixels:
        raise ValueError(f"exact Gibbs energy is limited to {params.max_exact_pixels} pixels, got {n}")
    flat = labels.reshape(-1).astype(np.int64)
    if flat.min() < 0 or flat.max() >= classes:
        raise ValueError(f"labels must lie in 0..{classes - 1}")

    energy = float(unary.reshape(-1, classes)[np.arange(n), flat].sum())
    positions = _positions(height, width)
    colours = image.reshape(n, -1)
    position_d2 = cdist(positions, positions, "sqeuclidean")
    alpha2 = 2 * params.theta_alpha**2
    kernel = params.w1 * np.exp(-position_d2 / alpha2 - cdist(colours, colours, "sqeuclidean") / (2 * params.theta_beta**2))
    if depth_values is not None:
        d = depth_values.reshape(-1, 1)
        kernel += params.w2 * np.exp(-position_d2 / alpha2 - cdist(d, d, "sqeuclidean") / (2 * params.theta_gamma**2))
    kernel += params.w3 * np.exp(-position_d2 / (2 * params.smooth_bandwidth**2))
    disagree = flat[:, None] != flat[None, :]
    return energy + 0.5 * float(np.sum(kernel * disagree))
