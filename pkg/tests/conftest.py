import numpy as np
import pytest

from kggan.flora import FloraSpec, generate_dataset


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(FloraSpec(), seed=0)


@pytest.fixture(scope="session")
def small_dataset():
    spec = FloraSpec(palette={"red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.15, 0.3, 0.95)},
                     shapes=("disc", "cross"), image_size=8, samples_per_category=12, n_unseen=1)
    return generate_dataset(spec, seed=3)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def record(number: int, name: str, ok: bool, detail: str) -> None:
    line = (number, name, bool(ok), detail)
    ACCEPTANCE.append(line)
    print(f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}")
    extra = getattr(terminalreporter.config, "_kggan_ablation_text", None)
    if extra:
        terminalreporter.section("ablation")
        terminalreporter.write_line(extra)
