import io
import json

import numpy as np
import pytest

from tailfactor import check_loss, load_panel, load_result, save_panel, save_result
from tailfactor.evt import TailEstimates
from tailfactor.exceptions import (
    ArgumentError,
    DataError,
    DuplicateCellError,
    IncompleteGridError,
    NonFiniteValueError,
)
from tailfactor.ftvm import FactorModel, FitResult
from tailfactor.panel import PanelData, TailConfig


class TestCheckLoss:
    def test_examples(self):
        assert check_loss(0, 0.1) == 0.0
        assert check_loss(2, 0.1) == pytest.approx(1.8)
        assert check_loss(-2, 0.1) == pytest.approx(0.2)

    def test_tau_out_of_range(self):
        for tau in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(ArgumentError):
                check_loss(1.0, tau)

    def test_nonnegative_zero_iff_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=200)
        for tau in (0.05, 0.5, 0.9):
            values = check_loss(x, tau)
            assert np.all(values > 0)
            assert check_loss(0.0, tau) == 0.0

    def test_reflection_identity(self):
        # rho_tau(x) + rho_tau(-x) = |x| for every x and tau
        rng = np.random.default_rng(1)
        x = rng.normal(size=100) * 10
        for tau in (0.01, 0.3, 0.77):
            lhs = check_loss(x, tau) + check_loss(-x, tau)
            np.testing.assert_allclose(lhs, np.abs(x), atol=1e-12)

    def test_minimizer_is_upper_tail_quantile(self):
        # minimizing sum(check_loss(z - q, tau)) over q picks the empirical
        # (1-tau)-quantile; brute force over the sample points for n <= 20
        rng = np.random.default_rng(2)
        for trial in range(25):
            n = rng.integers(3, 21)
            z = rng.normal(size=n) * rng.uniform(0.5, 5)
            tau = rng.uniform(0.05, 0.95)
            losses = [np.sum(check_loss(z - q, tau)) for q in z]
            best = min(losses)
            minimizers = [q for q, l in zip(z, losses) if l <= best + 1e-12]
            for q in minimizers:
                assert np.sum(z > q) <= tau * n + 1e-9
                assert np.sum(z >= q) >= tau * n - 1e-9


class TestPanelData:
    def test_basic(self):
        p = PanelData(np.arange(6.0).reshape(2, 3))
        assert p.n_units == 2 and p.n_periods == 3 and p.n_cells == 6
        assert p.unit_labels == ("u1", "u2")

    def test_flatten_time_major(self):
        p = PanelData(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(p.flatten_time_major(), [1.0, 3.0, 2.0, 4.0])

    def test_too_small(self):
        with pytest.raises(ArgumentError):
            PanelData(np.ones((1, 5)))

    def test_nonfinite_rejected(self):
        values = np.ones((3, 3))
        values[1, 2] = np.nan
        with pytest.raises(NonFiniteValueError, match="unit index 1, time index 2"):
            PanelData(values)

    def test_duplicate_labels_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            PanelData(np.ones((2, 2)), unit_labels=("a", "a"))

    def test_immutable(self):
        p = PanelData(np.ones((2, 2)))
        with pytest.raises(ValueError):
            p.values[0, 0] = 5.0


class TestTailConfig:
    def test_defaults(self):
        cfg = TailConfig(k=10)
        assert cfg.m == 0.1 and cfg.M == 1.6 and cfg.tau_star == 0.5
        assert cfg.c_ic == 10.0 and cfg.r_max == 3

    def test_bounds_must_straddle_one(self):
        with pytest.raises(ArgumentError):
            TailConfig(k=10, m=1.2, M=1.6)
        with pytest.raises(ArgumentError):
            TailConfig(k=10, m=0.1, M=0.9)

    def test_k_and_p_panel_checks(self):
        cfg = TailConfig(k=10, p=0.01)
        cfg.validate_for(100)
        with pytest.raises(ArgumentError):
            cfg.validate_for(10)
        with pytest.raises(ArgumentError):
            TailConfig(k=50, p=0.6).validate_for(100)

    def test_positive_fields(self):
        with pytest.raises(ArgumentError):
            TailConfig(k=0)
        with pytest.raises(ArgumentError):
            TailConfig(k=5, m=-0.1)
        with pytest.raises(ArgumentError):
            TailConfig(k=5, tau_star=1.5)


WIDE = "unit,t1,t2\na,1.0,2.0\nb,3.0,4.0\n"
LONG = "unit,time,value\na,1,1.0\na,2,2.0\nb,1,3.0\nb,2,4.0\n"


class TestLoadPanel:
    def test_wide_csv(self):
        p = load_panel(WIDE.encode(), "wide-csv")
        np.testing.assert_array_equal(p.values, [[1, 2], [3, 4]])
        assert p.unit_labels == ("a", "b")
        assert p.time_labels == ("t1", "t2")

    def test_long_csv(self):
        p = load_panel(LONG, "long-csv")
        np.testing.assert_array_equal(p.values, [[1, 2], [3, 4]])

    def test_long_csv_order_independent(self):
        rows = LONG.splitlines()
        shuffled = "\n".join([rows[0], rows[4], rows[2], rows[1], rows[3]]) + "\n"
        p = load_panel(shuffled, "long-csv")
        np.testing.assert_array_equal(p.values, [[1, 2], [3, 4]])

    def test_long_csv_missing_cell(self):
        partial = "unit,time,value\na,1,1.0\na,2,2.0\nb,1,3.0\n"
        with pytest.raises(IncompleteGridError, match=r"'b'.*'2'"):
            load_panel(partial, "long-csv")

    def test_long_csv_duplicate_cell(self):
        dup = LONG + "a,1,9.0\n"
        with pytest.raises(DuplicateCellError):
            load_panel(dup, "long-csv")

    def test_nonfinite_value(self):
        bad = "unit,time,value\na,1,nan\na,2,2.0\nb,1,3.0\nb,2,4.0\n"
        with pytest.raises(NonFiniteValueError, match="'a'"):
            load_panel(bad, "long-csv")

    def test_unparseable_value(self):
        bad = "unit,t1,t2\na,x,2.0\nb,3.0,4.0\n"
        with pytest.raises(DataError, match="row 2"):
            load_panel(bad, "wide-csv")

    def test_wide_header_guard(self):
        with pytest.raises(DataError, match='"unit"'):
            load_panel("id,t1\na,1.0\nb,2.0\n", "wide-csv")

    def test_json(self):
        doc = json.dumps({"units": ["a", "b"], "times": ["1", "2"], "values": [[1, 2], [3, 4]]})
        p = load_panel(doc, "json")
        np.testing.assert_array_equal(p.values, [[1, 2], [3, 4]])

    def test_json_missing_field(self):
        with pytest.raises(DataError, match="values"):
            load_panel(json.dumps({"units": ["a"], "times": ["1"]}), "json")

    def test_unknown_format(self):
        with pytest.raises(ArgumentError):
            load_panel(WIDE, "tsv")


class TestRoundTrips:
    @pytest.mark.parametrize("fmt", ["wide-csv", "long-csv", "json"])
    def test_save_load_identity(self, fmt):
        rng = np.random.default_rng(3)
        panel = PanelData(rng.normal(size=(4, 5)) * 1e3)
        sink = io.BytesIO()
        save_panel(panel, sink, fmt)
        back = load_panel(sink.getvalue(), fmt)
        np.testing.assert_array_equal(back.values, panel.values)
        assert back.unit_labels == panel.unit_labels
        assert back.time_labels == panel.time_labels


def _sample_fit_result():
    rng = np.random.default_rng(4)
    model = FactorModel(r=1, loadings=rng.uniform(0.5, 1.5, (1, 3)), factors=rng.uniform(0.5, 1.5, (1, 4)))
    tail = TailEstimates(u_intermediate=10.0, gamma_hat=0.5, k=3, n=12)
    return FitResult(model=model, tail=tail, final_loss=1.23456789012345, loss_trace=(2.0, 1.5), restarts_used=5)


class TestResultIO:
    def test_save_contains_tail_field(self):
        sink = io.BytesIO()
        save_result(_sample_fit_result(), sink)
        doc = json.loads(sink.getvalue())
        assert doc["schema_version"] == 1
        assert doc["tail"]["u_intermediate"] == 10.0

    def test_round_trip_bit_exact(self):
        result = _sample_fit_result()
        sink = io.BytesIO()
        save_result(result, sink)
        back = load_result(sink.getvalue())
        np.testing.assert_array_equal(back.model.loadings, result.model.loadings)
        np.testing.assert_array_equal(back.model.factors, result.model.factors)
        assert back.final_loss == result.final_loss
        assert back.loss_trace == result.loss_trace

    def test_save_to_closed_sink(self):
        handle = io.BytesIO()
        handle.close()
        with pytest.raises(OSError):
            save_result(_sample_fit_result(), handle)

    def test_unknown_schema_rejected(self):
        sink = io.BytesIO()
        save_result(_sample_fit_result(), sink)
        doc = json.loads(sink.getvalue())
        doc["schema_version"] = 99
        with pytest.raises(DataError, match="schema_version"):
            load_result(json.dumps(doc))
