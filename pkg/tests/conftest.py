import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv(x, w, b=None, stride=1, pad=0, dilation=1):
    """Direct nested-loop cross-correlation, used as an independent oracle."""
    sh = sw = stride
    ph, pw = (pad, pad) if np.isscalar(pad) else pad
    dh = dw = dilation
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - (kh - 1) * dh - 1) // sh + 1
    wo = (wd + 2 * pw - (kw - 1) * dw - 1) // sw + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            for u in range(kh):
                for v in range(kw):
                    patch = xp[:, :, i * sh + u * dh, j * sw + v * dw]  # (n, c)
                    out[:, :, i, j] += patch @ w[:, :, u, v].T
    if b is not None:
        out += b[None, :, None, None]
    return out


def zero_inflate(w, d):
    """Kernel with d-1 zeros inserted between taps."""
    co, ci, kh, kw = w.shape
    out = np.zeros((co, ci, (kh - 1) * d + 1, (kw - 1) * d + 1))
    out[:, :, ::d, ::d] = w
    return out


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def accept(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``accept(n, ok, detail)``; the line is printed immediately and
    again in the terminal summary.  The caller still asserts ``ok``.
    """
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
