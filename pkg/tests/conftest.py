from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from reconalign.imaging import save_image, sha256_bytes
from reconalign.manifest import DatasetManifest, ImageRecord, Label

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def smooth_image(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Low-frequency RGB image, so codecs and resamplers behave like they do on photos."""
    yy, xx = np.mgrid[0:h, 0:w] / max(w, h)
    chans = []
    for _ in range(3):
        fx, fy, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
        chans.append(0.5 + 0.4 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph))
    img = np.stack(chans, -1) + rng.normal(0, 0.02, (h, w, 3))
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def write_images(root, sizes, fmt="png", label=Label.REAL, tag="synthetic", seed=0, quality=90) -> DatasetManifest:
    rng = np.random.default_rng(seed)
    ext = {"png": "png", "jpeg": "jpg", "webp": "webp"}[fmt]
    recs = []
    for i, (w, h) in enumerate(sizes):
        name = f"img_{i:04d}.{ext}"
        data = save_image(smooth_image(rng, w, h), root / name, fmt, None if fmt == "png" else quality)
        recs.append(ImageRecord(f"{tag}/{name}", name, w, h, fmt, label, tag, sha256_bytes(data)))
    return DatasetManifest(root.resolve(), tuple(recs), {})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_reals(tmp_path):
    return write_images(tmp_path / "reals", [(40, 32), (64, 64), (50, 70)])


# -- acceptance report -------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}" + (f" ({detail})" if detail else ""))


@pytest.fixture
def record(request):
    """Attach a short measurement summary to the acceptance line of the running test."""
    def _record(text: str) -> None:
        request.node.criterion_detail = text
        print(text)
    return _record
