import logging

import numpy as np
import pytest

from averaging.utils.checks import (
    DomainError,
    NumericError,
    PreconditionError,
    ScenarioError,
    UsageError,
    check_epsilon,
    check_finite,
    check_interval,
    check_sample_size,
)
from averaging.utils.io import path_table, write_json, write_table
from averaging.utils.rates import default_window, fit_rate
from averaging.utils.utils import (
    CONSOLE_HANDLER,
    FILE_HANDLER,
    block_slices,
    get_logger,
    lq_norm,
    make_rng,
    map_blocks,
    mod1,
    sup_norm,
)
from averaging.utils.verdicts import all_hold, compare


def test_mod1_range():
    y = np.array([-1e-17, -0.25, 0.0, 1.0, 2.75, 1.0 - 1e-17])
    r = mod1(y)
    assert np.all((r >= 0.0) & (r < 1.0))
    assert r[1] == pytest.approx(0.75)
    assert r[4] == pytest.approx(0.75)


@pytest.fixture
def lab_handlers():
    root = logging.getLogger()
    level = root.level
    names = (CONSOLE_HANDLER, FILE_HANDLER)
    for h in [h for h in root.handlers if h.get_name() in names]:
        root.removeHandler(h)
    yield root
    root.setLevel(level)
    for h in [h for h in root.handlers if h.get_name() in names]:
        root.removeHandler(h)
        h.close()


def test_get_logger_handlers(lab_handlers, tmp_path, monkeypatch):
    monkeypatch.setenv("LAB_LOG_LEVEL", "warning")
    logfile = tmp_path / "lab.log"
    logger = get_logger(str(logfile))
    get_logger(str(logfile))
    names = [h.get_name() for h in logger.handlers]
    assert names.count(CONSOLE_HANDLER) == 1
    assert names.count(FILE_HANDLER) == 1
    console = next(h for h in logger.handlers if h.get_name() == CONSOLE_HANDLER)
    assert console.level == logging.WARNING

    logger.debug("bins resolved")
    for h in logger.handlers:
        h.flush()
    text = logfile.read_text(encoding="utf-8")
    assert "DEBUG   [lab:test_utils] bins resolved" in text


def test_make_rng_streams():
    a = make_rng(7, 3).random(5)
    b = make_rng(7, 3).random(5)
    c = make_rng(7, 4).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_lq_norm():
    v = np.array([3.0, -4.0])
    assert lq_norm(v, 2) == pytest.approx(np.sqrt(12.5))
    assert lq_norm(v, 1) == pytest.approx(3.5)
    assert lq_norm(np.array([]), 2) == 0.0


def test_block_slices():
    slices = block_slices(10, 4)
    assert [(s.start, s.stop) for s in slices] == [(0, 4), (4, 8), (8, 10)]


@pytest.mark.parametrize("threads", [1, 4])
def test_map_blocks_order(threads):
    out = map_blocks(lambda b, s: (b, s.start), 100, block_size=7, threads=threads)
    assert out == [(b, 7 * b) for b in range(15)]


def test_sup_norm():
    v = np.array([[1.0, -3.0], [0.5, 0.25]])
    assert np.array_equal(sup_norm(v), [3.0, 0.5])


def test_checks():
    check_interval("a", 0.5, 0.0, 1.0, closed=(False, False))
    with pytest.raises(DomainError):
        check_interval("a", 1.0, 0.0, 1.0, closed=(False, False))
    check_epsilon(0.0, 1.0)
    with pytest.raises(DomainError):
        check_epsilon(0.0, 1.0, allow_zero=False)
    with pytest.raises(DomainError):
        check_epsilon(1.0, 1.0)
    with pytest.raises(NumericError):
        check_finite("x", np.array([1.0, np.nan]), step=3)
    with pytest.raises(UsageError):
        check_sample_size(10)


def test_error_payloads():
    e = PreconditionError("too large", threshold=0.125)
    assert e.threshold == 0.125
    assert isinstance(e, UsageError)
    s = ScenarioError("boom", epsilon=0.01, sample=4)
    assert "epsilon=0.01" in str(s) and "sample=4" in str(s)


def test_fit_rate_linear():
    eps = [2.0**-k for k in range(4, 10)]
    series = fit_rate([(e, e) for e in eps])
    assert series.slope == pytest.approx(1.0)
    assert series.r_squared == pytest.approx(1.0)


def test_fit_rate_sqrt():
    eps = [2.0**-k for k in range(4, 10)]
    series = fit_rate([(e, 3.0 * e**0.5) for e in eps])
    assert series.slope == pytest.approx(0.5)


def test_fit_rate_constant():
    series = fit_rate([(e, 2.0) for e in (0.1, 0.01, 0.001)])
    assert series.slope == 0.0


def test_fit_rate_too_few():
    with pytest.raises(UsageError):
        fit_rate([(0.1, 1.0), (0.01, 0.0), (0.001, 1.0)])


def test_default_window():
    assert default_window([0.1, 0.01, 0.001]) is None
    assert default_window([0.1, 0.01, 0.001, 0.0001]) == (0.0001, 0.01)


def test_compare():
    v = compare("x", [1.0, 2.0, 3.0], 2.0)
    assert not v.holds
    assert v.violations == 1
    assert v.max_slack == pytest.approx(1.0)
    assert compare("empty", [], 1.0).holds
    soft = compare("soft", 5.0, 1.0, asserted=False)
    assert all_hold([compare("ok", 0.0, 1.0), soft])
    assert not all_hold([v])


def test_write_table_and_json(tmp_path):
    path = write_table([{"a": 1.0, "b": 2}], tmp_path / "sub" / "t.csv", seed=5)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "a,b,seed"
    df = path_table(np.array([0.0, 0.5]), np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert list(df.columns) == ["t", "x_1", "x_2"]
    verdict = compare("x", np.float64(1.0), 2.0, eps=np.float64(0.1))
    out = write_json({"v": verdict}, tmp_path / "v.json")
    assert '"holds": true' in out.read_text()
