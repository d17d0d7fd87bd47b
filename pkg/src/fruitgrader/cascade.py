"""Boosted cascade object detector: Haar features, AdaBoost stumps, stages.

Feature values are computed three ways (single window, training matrix,
vectorized sliding-window scan). All three share the same scaled geometry
and accumulate terms in the same order, so they agree bit for bit; the
tests rely on that equivalence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import imaging
from .imaging import BBox, Image, IntegralImage

log = logging.getLogger(__name__)

FEATURE_KINDS = ("two_rect_h", "two_rect_v", "three_rect_h", "three_rect_v", "four_rect")

# Part grid per kind: (splits along x, splits along y).
_KIND_SPLITS = {
    "two_rect_h": (2, 1),
    "two_rect_v": (1, 2),
    "three_rect_h": (3, 1),
    "three_rect_v": (1, 3),
    "four_rect": (2, 2),
}

# Part signs in scan order (x-major within y): +1 white, -1 black.
_KIND_SIGNS = {
    "two_rect_h": (-1, 1),
    "two_rect_v": (-1, 1),
    "three_rect_h": (1, -1, 1),
    "three_rect_v": (1, -1, 1),
    "four_rect": (1, -1, -1, 1),
}

MIN_WINDOW_STD = 1e-6
MIN_STAGE_NEGATIVES = 10
_EPS_CLAMP = 1e-10


class CascadeError(Exception):
    pass


class WindowTooSmallError(CascadeError):
    pass


class OutOfBoundsError(CascadeError):
    pass


class DegenerateWeightsError(CascadeError):
    pass


class DegenerateSplitError(CascadeError):
    """No stump beats chance: every feature/threshold has weighted error 0.5."""


class NoPositivesError(CascadeError):
    pass


class NoNegativesError(CascadeError):
    pass


class ImageSmallerThanWindowError(CascadeError):
    pass


@dataclass(frozen=True)
class HaarFeature:
    kind: str
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class Stump:
    feature_index: int
    threshold: float
    polarity: int
    alpha: float
    weighted_error: float


@dataclass(frozen=True)
class Stage:
    stumps: tuple
    threshold: float
    trained_far: float
    trained_tpr: float
    far_target_met: bool = True


@dataclass(frozen=True)
class CascadeModel:
    window_w: int
    window_h: int
    stages: tuple
    feature_pool: tuple
    format_version: int = 1


@dataclass(frozen=True)
class CascadeTrainConfig:
    false_alarm_rate: float = 0.5
    num_cascade_stages: int = 5
    object_training_size: object = "auto"  # "auto" or (w, h)
    per_stage_tpr_floor: float = 0.995
    max_stumps_per_stage: int = 50
    feature_budget: int = 5000
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.false_alarm_rate < 1):
            raise ValueError("false_alarm_rate must be in (0,1)")
        if self.num_cascade_stages < 1:
            raise ValueError("num_cascade_stages must be >= 1")
        if not (0 < self.per_stage_tpr_floor <= 1):
            raise ValueError("per_stage_tpr_floor must be in (0,1]")
        if self.feature_budget < 100:
            raise ValueError("feature_budget must be >= 100")


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float


@dataclass(frozen=True)
class ScanParams:
    """Sliding-window scan settings.

    min_support mirrors the merge threshold of classical cascade tooling: a
    candidate is kept only when at least that many raw acceptances (itself
    included) overlap it at IoU >= 0.5, which suppresses isolated one-window
    accidents.
    """

    scale_factor: float = 1.1
    stride: int = 2
    nms_iou: float = 0.3
    min_support: int = 3

    def __post_init__(self):
        if self.scale_factor <= 1:
            raise ValueError("scale_factor must be > 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.min_support < 1:
            raise ValueError("min_support must be >= 1")


# ---------------------------------------------------------------------------
# Feature pool and geometry


def generate_feature_pool(window: tuple[int, int], budget: int, seed: int):
    """Enumerate the Haar family over a window, subsampling down to budget."""
    win_w, win_h = window
    if win_w < 8 or win_h < 8:
        raise WindowTooSmallError(f"window must be at least 8x8, got {window}")
    features: list[HaarFeature] = []
    for kind in FEATURE_KINDS:
        kx, ky = _KIND_SPLITS[kind]
        for h in range(ky, win_h + 1, ky):
            for w in range(kx, win_w + 1, kx):
                for y in range(0, win_h - h + 1):
                    for x in range(0, win_w - w + 1):
                        features.append(HaarFeature(kind, x, y, w, h))
    if len(features) > budget:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(features), size=budget, replace=False))
        features = [features[i] for i in keep]
    return features


def _scale_coord(v: int, scale: float) -> int:
    return v if scale == 1.0 else int(round(v * scale))


def _scaled_parts(feature: HaarFeature, scale: float):
    """Scaled part rectangles with signed coefficients.

    Returns (parts, area_factor): parts is a tuple of (x0, y0, x1, y1, coeff)
    in window-relative pixels, or (None, 0.0) if scaling collapsed a part.
    White parts carry +1 and black parts -(white area / black area), so a
    constant region sums to zero; area_factor rescales to base-window units.
    """
    kx, ky = _KIND_SPLITS[feature.kind]
    signs = _KIND_SIGNS[feature.kind]
    xb = [_scale_coord(feature.x + feature.w * j // kx, scale) for j in range(kx + 1)]
    yb = [_scale_coord(feature.y + feature.h * j // ky, scale) for j in range(ky + 1)]
    rects = []
    i = 0
    for row in range(ky):
        for col in range(kx):
            rects.append((xb[col], yb[row], xb[col + 1], yb[row + 1], signs[i]))
            i += 1
    white_area = sum((x1 - x0) * (y1 - y0) for x0, y0, x1, y1, s in rects if s > 0)
    black_area = sum((x1 - x0) * (y1 - y0) for x0, y0, x1, y1, s in rects if s < 0)
    if white_area <= 0 or black_area <= 0:
        return None, 0.0
    ratio = white_area / black_area
    parts = tuple((x0, y0, x1, y1, 1.0 if s > 0 else -ratio) for x0, y0, x1, y1, s in rects)
    kx_base = feature.w // kx
    ky_base = feature.h // ky
    n_white = sum(1 for s in signs if s > 0)
    return parts, (n_white * kx_base * ky_base) / white_area


def _window_std(ii: IntegralImage, x: int, y: int, w: int, h: int) -> float:
    n = w * h
    s = imaging.rect_sum(ii, x, y, w, h)
    s2 = imaging.rect_sum_squared(ii, x, y, w, h)
    mean = s / n
    var = s2 / n - mean * mean
    return math.sqrt(max(var, 0.0))


def eval_feature(
    feature: HaarFeature,
    ii: IntegralImage,
    origin: tuple[int, int],
    scale: float = 1.0,
    window: tuple[int, int] | None = None,
) -> float:
    """Variance-normalized feature value for one window placement.

    The window (training-window size before scaling) defaults to the
    feature's own bounding extent; detection passes the model window.
    Near-constant windows (std below 1e-6) score 0.
    """
    ox, oy = origin
    if window is None:
        window = (feature.x + feature.w, feature.y + feature.h)
    sw = _scale_coord(window[0], scale)
    sh = _scale_coord(window[1], scale)
    if ox < 0 or oy < 0 or ox + sw > ii.width or oy + sh > ii.height:
        raise OutOfBoundsError(
            f"window ({ox},{oy},{sw},{sh}) outside {ii.width}x{ii.height} integral image"
        )
    parts, area_factor = _scaled_parts(feature, scale)
    if parts is None:
        return 0.0
    if parts[-1][2] > sw or parts[-1][3] > sh:
        raise OutOfBoundsError("scaled feature exceeds scaled window")
    std = _window_std(ii, ox, oy, sw, sh)
    if std < MIN_WINDOW_STD:
        return 0.0
    inv_std = 1.0 / std
    s = ii.sums
    raw = 0.0
    for x0, y0, x1, y1, coeff in parts:
        part_sum = (
            s[oy + y1, ox + x1] - s[oy + y0, ox + x1]
        ) - s[oy + y1, ox + x0] + s[oy + y0, ox + x0]
        raw = raw + coeff * part_sum
    return raw * area_factor * inv_std


def _feature_matrix(iis: list[IntegralImage], features, window: tuple[int, int]) -> np.ndarray:
    """Scale-1 feature values for window-sized images: shape (n, n_features).

    Accumulation order matches eval_feature exactly.
    """
    win_w, win_h = window
    n = len(iis)
    stacked = np.stack([ii.sums for ii in iis])  # (n, h+1, w+1)
    flat = stacked.reshape(n, -1)
    row_len = win_w + 1
    stds = np.array([_window_std(ii, 0, 0, win_w, win_h) for ii in iis])
    inv_std = np.where(stds < MIN_WINDOW_STD, 0.0, 1.0 / np.where(stds == 0, 1.0, stds))
    values = np.zeros((n, len(features)), dtype=np.float64)
    for j, feature in enumerate(features):
        parts, area_factor = _scaled_parts(feature, 1.0)
        raw = np.zeros(n, dtype=np.float64)
        for x0, y0, x1, y1, coeff in parts:
            part_sum = (
                flat[:, y1 * row_len + x1] - flat[:, y0 * row_len + x1]
            ) - flat[:, y1 * row_len + x0] + flat[:, y0 * row_len + x0]
            raw = raw + coeff * part_sum
        values[:, j] = raw * area_factor * inv_std
    return values


# ---------------------------------------------------------------------------
# AdaBoost weak learner


def train_stump(feature_values: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> Stump:
    """Best decision stump under weighted 0-1 loss via a sorted sweep.

    Ties break toward the lowest feature index, then the lowest threshold,
    then polarity +1. Raises DegenerateWeightsError if either label side has
    zero total weight, DegenerateSplitError if nothing beats chance.
    """
    values = np.asarray(feature_values, dtype=np.float64)
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    n, n_features = values.shape
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    w_pos = weights[labels > 0].sum()
    w_neg = weights[labels < 0].sum()
    if w_pos <= 0 or w_neg <= 0:
        raise DegenerateWeightsError("one label side has zero total weight")

    order = np.argsort(values, axis=0, kind="stable")  # (n, F)
    sorted_vals = np.take_along_axis(values, order, axis=0)
    w_sorted = weights[order]
    pos_sorted = np.where(labels[order] > 0, w_sorted, 0.0)
    # prefix[i] = weight of positives among the i smallest values
    pos_prefix = np.vstack([np.zeros((1, n_features)), np.cumsum(pos_sorted, axis=0)])
    all_prefix = np.vstack([np.zeros((1, n_features)), np.cumsum(w_sorted, axis=0)])
    neg_prefix = all_prefix - pos_prefix
    # polarity +1 predicts positive for values >= threshold; cut i places the
    # i smallest values below the threshold
    err_plus = pos_prefix + (w_neg - neg_prefix)

    thresholds = np.empty((n + 1, n_features))
    thresholds[0] = sorted_vals[0] - 1.0
    thresholds[n] = sorted_vals[-1] + 1.0
    if n > 1:
        thresholds[1:n] = (sorted_vals[:-1] + sorted_vals[1:]) / 2.0
    # cuts are usable at the ends and wherever neighbors strictly increase
    valid = np.ones((n + 1, n_features), dtype=bool)
    if n > 1:
        valid[1:n] = sorted_vals[1:] > sorted_vals[:-1]

    masked_p = np.where(valid, err_plus, np.inf)
    masked_m = np.where(valid, 1.0 - err_plus, np.inf)
    cols = np.arange(n_features)
    cut_p = np.argmin(masked_p, axis=0)  # first minimum = lowest threshold
    cut_m = np.argmin(masked_m, axis=0)
    err_p = masked_p[cut_p, cols]
    err_m = masked_m[cut_m, cols]
    thr_p = thresholds[cut_p, cols]
    thr_m = thresholds[cut_m, cols]

    use_plus = (err_p < err_m) | ((err_p == err_m) & (thr_p <= thr_m))
    feat_err = np.where(use_plus, err_p, err_m)
    feat_thr = np.where(use_plus, thr_p, thr_m)
    feat_pol = np.where(use_plus, 1, -1)

    j = int(np.argmin(feat_err))  # first minimum = lowest feature index
    err = float(feat_err[j])
    if err >= 0.5 - 1e-12:  # within rounding of chance: no usable split
        raise DegenerateSplitError(f"best stump error {err} is not below 0.5")
    eps = min(max(err, _EPS_CLAMP), 0.5 - _EPS_CLAMP)
    alpha = 0.5 * math.log((1.0 - eps) / eps)
    return Stump(j, float(feat_thr[j]), int(feat_pol[j]), alpha, eps)


def _stump_predict(stump: Stump, values: np.ndarray) -> np.ndarray:
    """Vote of one stump (+1/-1) for a vector of its feature's values."""
    above = values >= stump.threshold
    return np.where(above, stump.polarity, -stump.polarity).astype(np.float64)


# ---------------------------------------------------------------------------
# Stage and cascade training


def train_stage(
    pos_windows,
    neg_windows,
    pool,
    config: CascadeTrainConfig,
    extra_negative_sets: list[np.ndarray] | None = None,
) -> Stage:
    """AdaBoost a stage until its false-alarm target is met.

    After each stump the stage threshold is relaxed to the largest value
    keeping true-positive rate at or above the configured floor. The loop
    stops when the measured FAR on neg_windows (and on each index subset in
    extra_negative_sets, used by the cascade trainer to track the original
    pool) drops to the target, or when max_stumps_per_stage is reached.
    """
    if not pos_windows:
        raise NoPositivesError("no positive windows")
    if not neg_windows:
        raise NoNegativesError("no negative windows")
    window = (pos_windows[0].width, pos_windows[0].height)
    for w in list(pos_windows) + list(neg_windows):
        if (w.width, w.height) != window:
            raise ValueError(f"window {w.width}x{w.height} does not match {window}")
    iis = [imaging.integral_image(w) for w in list(pos_windows) + list(neg_windows)]
    values = _feature_matrix(iis, pool, window)
    n_pos = len(pos_windows)
    n_neg = len(neg_windows)
    labels = np.concatenate([np.ones(n_pos), -np.ones(n_neg)])
    weights = np.concatenate(
        [np.full(n_pos, 0.5 / n_pos), np.full(n_neg, 0.5 / n_neg)]
    )
    extra_sets = [np.asarray(s, dtype=np.int64) for s in (extra_negative_sets or [])]

    stumps: list[Stump] = []
    scores = np.zeros(n_pos + n_neg)
    threshold = 0.0
    far = 1.0
    tpr = 1.0
    met = False
    for _ in range(config.max_stumps_per_stage):
        try:
            stump = train_stump(values, labels, weights)
        except DegenerateSplitError:
            if not stumps:
                raise
            log.warning("stage stopped early: no stump beats chance")
            break
        stumps.append(stump)
        votes = _stump_predict(stump, values[:, stump.feature_index])
        weights = weights * np.exp(-stump.alpha * labels * votes)
        weights = weights / weights.sum()
        scores = scores + stump.alpha * votes

        pos_scores = scores[:n_pos]
        neg_scores = scores[n_pos:]
        k = math.ceil(config.per_stage_tpr_floor * n_pos)
        threshold = float(np.sort(pos_scores)[::-1][k - 1])
        tpr = float(np.mean(pos_scores >= threshold))
        far = float(np.mean(neg_scores >= threshold))
        extra_ok = all(
            len(s) == 0 or float(np.mean(neg_scores[s] >= threshold)) <= config.false_alarm_rate
            for s in extra_sets
        )
        if far <= config.false_alarm_rate and extra_ok:
            met = True
            break
    return Stage(tuple(stumps), threshold, far, tpr, met)


def _stage_scores(stage: Stage, values: np.ndarray, col_of=None) -> np.ndarray:
    """Vote sums of a trained stage for rows of a scale-1 value matrix.

    col_of maps pool feature indices to matrix columns when the matrix holds
    only a feature subset; by default columns are pool indices.
    """
    s = np.zeros(values.shape[0])
    for stump in stage.stumps:
        col = stump.feature_index if col_of is None else col_of[stump.feature_index]
        s = s + stump.alpha * _stump_predict(stump, values[:, col])
    return s


def _used_feature_matrix(stages, pool, windows, window):
    """Value matrix restricted to features any stage's stumps reference."""
    used = sorted({sp.feature_index for st in stages for sp in st.stumps})
    col_of = {fi: col for col, fi in enumerate(used)}
    iis = [imaging.integral_image(w) for w in windows]
    values = _feature_matrix(iis, [pool[fi] for fi in used], window)
    return values, col_of


def _classify_windows_scale1(model_stages, pool, windows, window):
    """(accepted mask, margin-sum scores) for window-sized gray images."""
    n = len(windows)
    values, col_of = _used_feature_matrix(model_stages, pool, windows, window)
    alive = np.ones(n, dtype=bool)
    scores = np.zeros(n)
    for stage in model_stages:
        if not alive.any():
            break
        margins = _stage_scores(stage, values, col_of) - stage.threshold
        scores = np.where(alive, scores + margins, scores)
        alive = alive & (margins >= 0)
    return alive, scores


def resolve_window_size(positives, object_training_size) -> tuple[int, int]:
    """Fixed size passes through; 'auto' uses the median aspect ratio with
    the longer side at 24 px and both sides clamped to at least 8."""
    if object_training_size != "auto":
        w, h = object_training_size
        if w < 8 or h < 8:
            raise WindowTooSmallError(f"training window {object_training_size} below 8x8")
        return int(w), int(h)
    aspects = sorted(p.height / p.width for p in positives)
    aspect = aspects[len(aspects) // 2]
    if aspect >= 1.0:
        return max(8, int(round(24 / aspect))), 24
    return 24, max(8, int(round(24 * aspect)))


def _to_gray_window(img: Image, window: tuple[int, int]) -> Image:
    if img.channels == 3:
        img = imaging.to_grayscale(img)
    if (img.width, img.height) != window:
        img = imaging.resize_bilinear(img, window[0], window[1])
    return img


def initial_pool_size(n_positives: int) -> int:
    """Training-negative pool size used by train_cascade."""
    return max(2 * n_positives, 200)


def initial_negative_pool(sources, window: tuple[int, int], n: int, seed: int):
    """Seeded random window crops from negative images, resized to window.

    Exposed so the training-negative pool can be regenerated exactly when
    measuring the trained cascade.
    """
    rng = np.random.default_rng(seed)
    return _random_negatives(sources, window, n, rng)


def _random_negatives(sources, window, n, rng):
    win_w, win_h = window
    usable = [s for s in sources if s.width >= win_w and s.height >= win_h]
    if not usable:
        raise NoNegativesError("no negative source is at least window-sized")
    out = []
    for _ in range(n):
        src = usable[int(rng.integers(len(usable)))]
        max_scale = min(src.width / win_w, src.height / win_h)
        scale = float(rng.uniform(1.0, max_scale)) if max_scale > 1 else 1.0
        w = win_w * scale
        h = win_h * scale
        x = float(rng.uniform(0, src.width - w)) if src.width > w else 0.0
        y = float(rng.uniform(0, src.height - h)) if src.height > h else 0.0
        patch = imaging.crop(src, BBox(x, y, max(w, 1.0), max(h, 1.0)))
        out.append(_to_gray_window(patch, window))
    return out


def _mine_false_positives(stages, pool, sources, window, needed, rng):
    """Scan negative sources with the partial cascade; survivors are the
    false positives the next stage must learn to reject."""
    partial = CascadeModel(window[0], window[1], tuple(stages), tuple(pool))
    scan = ScanParams(scale_factor=1.1, stride=2, nms_iou=0.3)
    found: list[Image] = []
    order = rng.permutation(len(sources))
    for idx in order:
        src = sources[idx]
        if src.width < window[0] or src.height < window[1]:
            continue
        gray = imaging.to_grayscale(src) if src.channels == 3 else src
        for det in _scan_candidates(partial, gray, scan):
            found.append(_to_gray_window(imaging.crop(src, det.box), window))
        if len(found) >= 4 * needed:
            break
    if len(found) > needed:
        keep = rng.choice(len(found), size=needed, replace=False)
        return [found[i] for i in np.sort(keep)]
    return found


def train_cascade(positives, negative_sources, config: CascadeTrainConfig) -> CascadeModel:
    """Train an attentional cascade with between-stage negative mining.

    The negatives each stage sees are the not-yet-rejected windows from the
    initial pool plus freshly mined false positives of the partial cascade.
    Training stops early (with a warning) if mining cannot refill the pool.
    """
    positives = list(positives)
    negative_sources = list(negative_sources)
    if not positives:
        raise NoPositivesError("need at least one positive image")
    if not negative_sources:
        raise NoNegativesError("need at least one negative source image")
    window = resolve_window_size(positives, config.object_training_size)
    rng = np.random.default_rng(config.seed)
    pool = generate_feature_pool(window, config.feature_budget, config.seed)
    pos_windows = [_to_gray_window(p, window) for p in positives]

    n_neg = initial_pool_size(len(pos_windows))
    neg_windows = initial_negative_pool(negative_sources, window, n_neg, config.seed)
    # indices into the current pool that came from the initial pool
    retained = np.arange(len(neg_windows))

    stages: list[Stage] = []
    for stage_idx in range(config.num_cascade_stages):
        stage = train_stage(
            pos_windows, neg_windows, pool, config,
            extra_negative_sets=[retained],
        )
        stages.append(stage)
        if not stage.far_target_met:
            log.warning(
                "stage %d stopped at %d stumps with FAR %.4f above target %.4f",
                stage_idx + 1, len(stage.stumps), stage.trained_far, config.false_alarm_rate,
            )
        if stage_idx == config.num_cascade_stages - 1:
            break
        # discard correctly rejected negatives, keep the stage's false positives
        values, col_of = _used_feature_matrix([stage], pool, neg_windows, window)
        margins = _stage_scores(stage, values, col_of) - stage.threshold
        keep = margins >= 0
        survivors = [w for w, k in zip(neg_windows, keep) if k]
        retained_mask = np.zeros(len(neg_windows), dtype=bool)
        retained_mask[retained] = True
        retained_surv = retained_mask[keep]

        needed = n_neg - len(survivors)
        mined = _mine_false_positives(stages, pool, negative_sources, window, needed, rng)
        neg_windows = survivors + mined
        retained = np.nonzero(np.concatenate([retained_surv, np.zeros(len(mined), dtype=bool)]))[0]
        if len(neg_windows) < MIN_STAGE_NEGATIVES:
            log.warning(
                "negative mining exhausted after stage %d (%d windows left); "
                "returning cascade with %d stages",
                stage_idx + 1, len(neg_windows), len(stages),
            )
            break
    return CascadeModel(window[0], window[1], tuple(stages), tuple(pool))


# ---------------------------------------------------------------------------
# Inference


def classify_window(
    model: CascadeModel, ii: IntegralImage, origin: tuple[int, int], scale: float = 1.0
) -> tuple[bool, float]:
    """Run the stages in order; reject on the first stage below threshold.

    The returned score is the sum of stage margins over evaluated stages.
    """
    window = (model.window_w, model.window_h)
    score = 0.0
    for stage in model.stages:
        votes = 0.0
        for stump in stage.stumps:
            v = eval_feature(model.feature_pool[stump.feature_index], ii, origin, scale, window)
            votes += stump.alpha * (stump.polarity if v >= stump.threshold else -stump.polarity)
        margin = votes - stage.threshold
        score += margin
        if margin < 0:
            return False, score
    return True, score


def _eval_feature_batch(feature, ii, oxs, oys, scale, inv_std):
    """eval_feature over arrays of origins; matches the scalar op bitwise."""
    parts, area_factor = _scaled_parts(feature, scale)
    if parts is None:
        return np.zeros(len(oxs))
    s = ii.sums
    raw = np.zeros(len(oxs))
    for x0, y0, x1, y1, coeff in parts:
        part_sum = (
            s[oys + y1, oxs + x1] - s[oys + y0, oxs + x1]
        ) - s[oys + y1, oxs + x0] + s[oys + y0, oxs + x0]
        raw = raw + coeff * part_sum
    return raw * area_factor * inv_std


def detect(model: CascadeModel, image: Image, scan: ScanParams | None = None) -> list[Detection]:
    """Multi-scale sliding-window detection with greedy NMS.

    Output is ordered by descending score (ties by x, then y) and is fully
    deterministic for a fixed model, image, and scan parameters.
    """
    scan = scan or ScanParams()
    if image.width < model.window_w or image.height < model.window_h:
        raise ImageSmallerThanWindowError(
            f"image {image.width}x{image.height} smaller than window "
            f"{model.window_w}x{model.window_h}"
        )
    gray = imaging.to_grayscale(image) if image.channels == 3 else image
    candidates = _scan_candidates(model, gray, scan)
    support = _overlap_support(candidates)
    kept = [d for d, s in zip(candidates, support) if s >= scan.min_support]
    kept_support = [s for s in support if s >= scan.min_support]
    return _nms(kept, scan.nms_iou, kept_support)


def _scan_candidates(model: CascadeModel, gray: Image, scan: ScanParams) -> list[Detection]:
    """All accepted windows of the scale pyramid, before NMS."""
    ii = imaging.integral_image(gray)

    candidates: list[Detection] = []
    k = 0
    while True:
        scale = scan.scale_factor**k
        sw = _scale_coord(model.window_w, scale)
        sh = _scale_coord(model.window_h, scale)
        if sw > gray.width or sh > gray.height:
            break
        stride = max(1, int(round(scan.stride * scale)))
        xs = np.arange(0, gray.width - sw + 1, stride, dtype=np.int64)
        ys = np.arange(0, gray.height - sh + 1, stride, dtype=np.int64)
        oxs, oys = np.meshgrid(xs, ys)
        oxs = oxs.ravel()
        oys = oys.ravel()

        n_win = sw * sh
        s, s2 = ii.sums, ii.squared_sums
        tot = (s[oys + sh, oxs + sw] - s[oys, oxs + sw]) - s[oys + sh, oxs] + s[oys, oxs]
        tot2 = (s2[oys + sh, oxs + sw] - s2[oys, oxs + sw]) - s2[oys + sh, oxs] + s2[oys, oxs]
        mean = tot / n_win
        var = tot2 / n_win - mean * mean
        std = np.sqrt(np.maximum(var, 0.0))
        inv_std = np.where(std < MIN_WINDOW_STD, 0.0, 1.0 / np.where(std == 0, 1.0, std))

        scores = np.zeros(len(oxs))
        alive = np.ones(len(oxs), dtype=bool)
        for stage in model.stages:
            if not alive.any():
                break
            idx = np.nonzero(alive)[0]
            votes = np.zeros(len(idx))
            for stump in stage.stumps:
                v = _eval_feature_batch(
                    model.feature_pool[stump.feature_index],
                    ii, oxs[idx], oys[idx], scale, inv_std[idx],
                )
                votes = votes + stump.alpha * np.where(
                    v >= stump.threshold, float(stump.polarity), float(-stump.polarity)
                )
            margins = votes - stage.threshold
            scores[idx] += margins
            alive[idx] = margins >= 0
        for i in np.nonzero(alive)[0]:
            candidates.append(
                Detection(BBox(float(oxs[i]), float(oys[i]), float(sw), float(sh)), float(scores[i]))
            )
        k += 1

    return candidates


def _overlap_support(candidates: list[Detection]) -> list[int]:
    """For each candidate, how many candidates overlap it at IoU >= 0.5."""
    n = len(candidates)
    if n == 0:
        return []
    x0 = np.array([d.box.x for d in candidates])
    y0 = np.array([d.box.y for d in candidates])
    x1 = np.array([d.box.x2 for d in candidates])
    y1 = np.array([d.box.y2 for d in candidates])
    area = (x1 - x0) * (y1 - y0)
    ix = np.maximum(0.0, np.minimum(x1[:, None], x1[None, :]) - np.maximum(x0[:, None], x0[None, :]))
    iy = np.maximum(0.0, np.minimum(y1[:, None], y1[None, :]) - np.maximum(y0[:, None], y0[None, :]))
    inter = ix * iy
    union = area[:, None] + area[None, :] - inter
    return (inter / union >= 0.5).sum(axis=1).tolist()


def _nms(candidates: list[Detection], iou_threshold: float, support: list[int] | None = None) -> list[Detection]:
    """Greedy NMS by descending score.

    Equal scores are common (stage votes are discrete), so ties prefer the
    candidate corroborated by the most overlapping raw acceptances; remaining
    ties fall back to x then y. Output is sorted score desc, then x, then y.
    """
    from .metrics import iou

    if not candidates:
        return []
    if support is None:
        support = _overlap_support(candidates)
    order = sorted(
        range(len(candidates)),
        key=lambda i: (-candidates[i].score, -support[i], candidates[i].box.x, candidates[i].box.y),
    )
    kept: list[Detection] = []
    for i in order:
        det = candidates[i]
        if all(iou(det.box, k.box) <= iou_threshold for k in kept):
            kept.append(det)
    return sorted(kept, key=lambda d: (-d.score, d.box.x, d.box.y))


# ---------------------------------------------------------------------------
# JSON persistence (standalone inspection format)


def cascade_to_json(model: CascadeModel) -> dict:
    return {
        "format_version": model.format_version,
        "window": [model.window_w, model.window_h],
        "feature_pool": [
            {"kind": f.kind, "x": f.x, "y": f.y, "w": f.w, "h": f.h} for f in model.feature_pool
        ],
        "stages": [
            {
                "threshold": st.threshold,
                "trained_far": st.trained_far,
                "trained_tpr": st.trained_tpr,
                "far_target_met": st.far_target_met,
                "stumps": [
                    {
                        "feature_index": sp.feature_index,
                        "threshold": sp.threshold,
                        "polarity": sp.polarity,
                        "alpha": sp.alpha,
                        "weighted_error": sp.weighted_error,
                    }
                    for sp in st.stumps
                ],
            }
            for st in model.stages
        ],
    }


def cascade_from_json(doc: dict) -> CascadeModel:
    pool = tuple(HaarFeature(f["kind"], f["x"], f["y"], f["w"], f["h"]) for f in doc["feature_pool"])
    stages = tuple(
        Stage(
            tuple(
                Stump(
                    sp["feature_index"], sp["threshold"], sp["polarity"],
                    sp["alpha"], sp["weighted_error"],
                )
                for sp in st["stumps"]
            ),
            st["threshold"], st["trained_far"], st["trained_tpr"], st["far_target_met"],
        )
        for st in doc["stages"]
    )
    return CascadeModel(doc["window"][0], doc["window"][1], stages, pool, doc["format_version"])
