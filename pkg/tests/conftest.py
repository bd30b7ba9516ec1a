import numpy as np
import pytest
from scipy import ndimage

from ctbench.phantom import PhantomSpec, generate_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def area_disk(n: int, radius: float, supersample: int = 4) -> np.ndarray:
    """Disk of ``radius`` (in half-widths) with pixel values = covered area."""
    m = n * supersample
    c = (np.arange(m) - (m - 1) / 2) * 2 / m
    X, Y = np.meshgrid(c, -c)
    inside = (X**2 + Y**2 <= radius**2).astype(float)
    return inside.reshape(n, supersample, n, supersample).mean(axis=(1, 3))


def smooth_phantom(n: int, sigma: float = 1.0, seed: int = 0) -> np.ndarray:
    """The default apple phantom blurred by a Gaussian of ``sigma`` pixels."""
    img = generate_phantom(PhantomSpec(size=n, seed=seed)).image.values
    return ndimage.gaussian_filter(img, sigma)


def psnr_oracle(x, ref) -> float:
    x, ref = np.asarray(x, float).ravel().tolist(), np.asarray(ref, float).ravel().tolist()
    mse = sum((a - b) ** 2 for a, b in zip(x, ref)) / len(x)
    R = max(ref) - min(ref)
    return 10 * np.log10(R * R / mse)


def ssim_oracle(x, ref, win: int = 11, sigma: float = 1.5) -> float:
    """SSIM by explicit per-window weighted moments (slow, independent path)."""
    x, ref = np.asarray(x, float), np.asarray(ref, float)
    R = ref.max() - ref.min()
    C1, C2 = (0.01 * R) ** 2, (0.03 * R) ** 2
    ax = np.arange(win) - (win - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    vals = []
    for i in range(x.shape[0] - win + 1):
        for j in range(x.shape[1] - win + 1):
            a = x[i : i + win, j : j + win]
            b = ref[i : i + win, j : j + win]
            ma, mb = (g * a).sum(), (g * b).sum()
            va = (g * (a - ma) ** 2).sum()
            vb = (g * (b - mb) ** 2).sum()
            cab = (g * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + C1) * (2 * cab + C2) / ((ma**2 + mb**2 + C1) * (va + vb + C2)))
    return float(np.mean(vals))


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
