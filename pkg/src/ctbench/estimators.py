"""scikit-learn style wrappers around the functional pipeline.

Transformers work on batches: images are ``(n, N, N)`` arrays and sinograms
``(n, angles, bins)`` arrays on a half-offset angle grid. Splitters follow the
cross-validator protocol with a single (train, test) fold, where the test
fold is the balanced subset.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ctbench._validation import (
    check_count_table,
    check_image_batch,
    check_nonnegative,
    check_positive_int,
    check_sinogram_batch,
)
from ctbench.degrade import add_gaussian_noise, apply_scatter, default_kernel_table
from ctbench.errors import DataError
from ctbench.projector import (
    Sinogram,
    parallel_geometry,
    project_without_inverse_crime,
    radon_forward,
)
from ctbench.recon import ReconSettings, apply_sampling, cgls, fbp, make_sampling
from ctbench.split import (
    DEFAULT_GAP,
    DEFAULT_NODE_LIMIT,
    DEFAULT_PRIMARY,
    DEFAULT_TOLERANCE,
    empirical_split,
    miqp_split,
    normalize_table,
)


def _sample_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), i]).generate_state(1, np.uint64)[0])


class RadonProjector(TransformerMixin, BaseEstimator):
    """Parallel-beam projection of square images.

    ``upsample > 1`` simulates the measurement through a finer model so the
    data do not lie in the range of the coarse operator.
    """

    def __init__(self, n_angles=50, pixel_size=1.0, detector_bins=None, upsample=1):
        self.n_angles = n_angles
        self.pixel_size = pixel_size
        self.detector_bins = detector_bins
        self.upsample = upsample

    def fit(self, X, y=None):
        X = check_image_batch(X)
        check_positive_int(self.n_angles, "n_angles")
        check_positive_int(self.upsample, "upsample")
        self.n_pixels_ = X.shape[1]
        self.geometry_ = parallel_geometry(
            self.n_pixels_, self.n_angles, self.pixel_size, self.detector_bins
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "geometry_")
        X = check_image_batch(X)
        if X.shape[1] != self.n_pixels_:
            raise DataError(f"fitted for {self.n_pixels_}^2 images, got {X.shape[1:]}")
        if self.upsample == 1:
            return np.stack([radon_forward(x, self.geometry_).values for x in X])
        return np.stack(
            [project_without_inverse_crime(x, self.geometry_, self.upsample).values for x in X]
        )


class GaussianNoise(TransformerMixin, BaseEstimator):
    """Additive noise with std ``fraction * |mean|`` of each sinogram."""

    def __init__(self, fraction=0.05, seed=0):
        self.fraction = fraction
        self.seed = seed

    def fit(self, X, y=None):
        check_sinogram_batch(X)
        self.fraction_ = check_nonnegative(self.fraction, "fraction")
        return self

    def transform(self, X):
        check_is_fitted(self, "fraction_")
        X = check_sinogram_batch(X)
        out = np.empty_like(X)
        for i, s in enumerate(X):
            geo = parallel_geometry(1, s.shape[0], detector_bins=s.shape[1])
            noisy = add_gaussian_noise(Sinogram(geo, s), self.fraction, _sample_seed(self.seed, i))
            out[i] = noisy.values
        return out


class ScatterDegrader(TransformerMixin, BaseEstimator):
    """Kernel-superposition scatter on log data, one projection at a time."""

    def __init__(self, alpha=5.0, kernel_table=None, I0=1.0, detector_spacing=1.0):
        self.alpha = alpha
        self.kernel_table = kernel_table
        self.I0 = I0
        self.detector_spacing = detector_spacing

    def fit(self, X, y=None):
        check_sinogram_batch(X)
        check_nonnegative(self.alpha, "alpha")
        self.table_ = default_kernel_table() if self.kernel_table is None else self.kernel_table
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        X = check_sinogram_batch(X)
        out = np.empty_like(X)
        for i, s in enumerate(X):
            geo = parallel_geometry(1, s.shape[0], pixel_size=self.detector_spacing,
                                    detector_bins=s.shape[1])
            out[i] = apply_scatter(Sinogram(geo, s), self.table_, self.alpha, self.I0).values
        return out


class _Reconstructor(TransformerMixin, BaseEstimator):
    def _geometry(self, shape):
        n_angles, bins = shape
        n = self.output_size
        if n is None:
            n = int(np.floor(bins / np.sqrt(2) + 1e-9))
        return parallel_geometry(n, n_angles, self.pixel_size, detector_bins=bins)

    def fit(self, X, y=None):
        X = check_sinogram_batch(X)
        self.geometry_ = self._geometry(X.shape[1:])
        self.sampling_ = make_sampling(self.sampling, self.geometry_.angles)
        return self

    def transform(self, X):
        check_is_fitted(self, "geometry_")
        X = check_sinogram_batch(X)
        if X.shape[1:] != (self.geometry_.n_angles, self.geometry_.detector_bins):
            raise DataError("sinogram shape differs from the fitted one")
        out = []
        for s in X:
            sino = apply_sampling(Sinogram(self.geometry_, s), self.sampling_)
            out.append(self._reconstruct(sino))
        return np.stack(out)


class FBPReconstructor(_Reconstructor):
    """Ramp-filtered back-projection after restricting to ``sampling``."""

    def __init__(self, sampling="full", cutoff=1.0, output_size=None, pixel_size=1.0):
        self.sampling = sampling
        self.cutoff = cutoff
        self.output_size = output_size
        self.pixel_size = pixel_size

    def _reconstruct(self, sino):
        n = int(round(self.geometry_.fov_width / self.pixel_size))
        return fbp(sino, ReconSettings("ramp", self.cutoff, 1, n)).values


class CGLSReconstructor(_Reconstructor):
    """CGLS from zero; ``residual_norms_`` keeps the last call's residuals."""

    def __init__(self, sampling="full", iterations=15, output_size=None, pixel_size=1.0):
        self.sampling = sampling
        self.iterations = iterations
        self.output_size = output_size
        self.pixel_size = pixel_size

    def _reconstruct(self, sino):
        n = int(round(self.geometry_.fov_width / self.pixel_size))
        res = cgls(sino, ReconSettings(iterations=self.iterations, output_size=n))
        self.residual_norms_ = res.residual_norms
        return res.image.values


class _Splitter(BaseEstimator):
    def fit(self, X, y=None):
        table = check_count_table(X)
        self.table_ = table
        self.result_ = self._solve(normalize_table(table))
        self.selection_ = np.asarray(self.result_.selection)
        return self

    def split(self, X=None, y=None, groups=None):
        """Yield one ``(train, test)`` pair of row indices; test is the subset."""
        if X is not None or not hasattr(self, "result_"):
            self.fit(X)
        sel = self.selection_.astype(bool)
        yield np.flatnonzero(~sel), np.flatnonzero(sel)

    def get_n_splits(self, X=None, y=None, groups=None):
        return 1


class EmpiricalSplitter(_Splitter):
    """Best successful prefix among random permutations.

    ``primary_defect`` may be a column name or index; count arrays get
    columns named ``defect1``, ``defect2``, ...
    """

    def __init__(self, target=0.2, n_subset=20, samples=10_000,
                 tolerance=DEFAULT_TOLERANCE, primary_defect=DEFAULT_PRIMARY, seed=0):
        self.target = target
        self.n_subset = n_subset
        self.samples = samples
        self.tolerance = tolerance
        self.primary_defect = primary_defect
        self.seed = seed

    def _solve(self, matrix):
        return empirical_split(matrix, self.target, self.n_subset, self.samples,
                               self.tolerance, self.primary_defect, self.seed)


class MIQPSplitter(_Splitter):
    """Certified least-squares balanced subset by branch and bound."""

    def __init__(self, targets=0.2, n_subset=20, gap=DEFAULT_GAP,
                 node_limit=DEFAULT_NODE_LIMIT, time_limit=None):
        self.targets = targets
        self.n_subset = n_subset
        self.gap = gap
        self.node_limit = node_limit
        self.time_limit = time_limit

    def _solve(self, matrix):
        return miqp_split(matrix, self.targets, self.n_subset, self.gap,
                          self.node_limit, self.time_limit)
