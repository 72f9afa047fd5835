import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivwald import (
    DataError,
    Link,
    ObservationTable,
    Scenario,
    ScenarioSpec,
    WorkingModelSpec,
    ZKind,
    design,
    dichotomize,
    load_csv,
    validate,
)
from ivwald.data import NUISANCES


def small_table(**kw):
    args = dict(
        y=np.array([1.0, 0.0, 1.0]),
        d=np.array([0.0, 1.0, 1.0]),
        z=np.array([0.3, -1.2, 0.8]),
        x=np.array([[1.0, 0.5], [1.0, -0.2], [1.0, 2.0]]),
    )
    args.update(kw)
    return ObservationTable(**args)


class TestValidate:
    def test_accepts_valid_table(self):
        t = small_table()
        assert validate(t) is t

    def test_rejects_nonbinary_treatment(self):
        with pytest.raises(DataError, match="treatment not binary"):
            validate(small_table(d=np.array([0.0, 2.0, 1.0])))

    def test_rejects_nonfinite_instrument(self):
        with pytest.raises(DataError, match="non-finite value in column z at row 1"):
            validate(small_table(z=np.array([0.3, np.nan, 0.8])))

    def test_rejects_length_mismatch(self):
        with pytest.raises(DataError, match="column d has length 2"):
            validate(small_table(d=np.array([0.0, 1.0])))

    def test_rejects_missing_intercept(self):
        x = np.array([[1.0, 0.5], [2.0, -0.2], [1.0, 2.0]])
        with pytest.raises(DataError, match="first column of x"):
            validate(small_table(x=x))

    def test_rejects_missing_categorical_level(self):
        t = small_table(z=np.array([0.0, 0.0, 2.0]), z_kind=ZKind.CATEGORICAL, z_levels=3)
        with pytest.raises(DataError, match="level 1 of z has no observations"):
            validate(t)

    def test_accepts_binary_outcome_flag(self):
        assert small_table().y_binary
        assert not small_table(y=np.array([0.5, 0.0, 1.0])).y_binary


class TestDesign:
    def test_intercept_column(self):
        m = design(small_table(), [0])
        assert m.shape == (3, 1)
        assert np.all(m == 1.0)

    def test_column_selection_preserves_order(self):
        t = small_table(x=np.array([[1.0, 0.5, 9.0], [1.0, -0.2, 8.0], [1.0, 2.0, 7.0]]))
        m = design(t, [0, 2])
        assert np.array_equal(m, t.x[:, [0, 2]])

    def test_all_columns_equals_x(self):
        t = small_table()
        assert np.array_equal(design(t, range(t.p)), t.x)

    def test_out_of_range_index(self):
        with pytest.raises(DataError, match="out of range"):
            design(small_table(), [5])


class TestDichotomize:
    def test_median_split_five_points(self):
        t = small_table(
            z=np.array([1.0, 2.0, 3.0, 4.0, 5.0]),
            y=np.zeros(5), d=np.array([0.0, 1.0, 0.0, 1.0, 0.0]),
            x=np.ones((5, 1)),
        )
        out = dichotomize(t, 0.5)
        assert np.array_equal(out.z, [0.0, 0.0, 1.0, 1.0, 1.0])
        assert out.z_kind is ZKind.CATEGORICAL and out.z_levels == 2

    def test_upper_quantile_count(self):
        t = small_table(
            z=np.arange(1.0, 11.0), y=np.zeros(10),
            d=np.array([0.0, 1.0] * 5), x=np.ones((10, 1)),
        )
        assert dichotomize(t, 0.8).z.sum() == 3

    def test_constant_instrument_rejected(self):
        t = small_table(z=np.ones(3))
        with pytest.raises(DataError, match="degenerate"):
            dichotomize(t, 0.5)

    def test_requires_continuous_kind(self):
        t = small_table(z=np.array([0.0, 1.0, 1.0]), z_kind=ZKind.CATEGORICAL, z_levels=2)
        with pytest.raises(DataError, match="continuous"):
            dichotomize(t, 0.5)

    def test_preserves_other_columns_bit_exactly(self):
        t = small_table(z=np.array([0.3, -1.2, 0.8]))
        out = dichotomize(t, 0.4)
        for name in ("y", "d", "x"):
            assert np.array_equal(getattr(out, name), getattr(t, name))
            assert np.shares_memory(getattr(out, name), getattr(t, name))

    @given(
        z=st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=40),
        q=st.floats(0.01, 0.99),
    )
    @settings(max_examples=80, deadline=None)
    def test_nearest_rank_matches_enumeration(self, z, q):
        z = np.asarray(z)
        if z.min() == z.max():
            return
        n = len(z)
        t = small_table(z=z, y=np.zeros(n), d=np.tile([0.0, 1.0], n)[:n], x=np.ones((n, 1)))
        out = dichotomize(t, q)
        rank = max(1, int(np.ceil(q * n)))
        threshold = sorted(z)[rank - 1]
        expected = (z >= threshold).astype(float)
        assert np.array_equal(out.z, expected)
        assert 0 < out.z.sum() <= n


class TestWorkingModelSpec:
    def test_default_links_binary_everything(self):
        spec = WorkingModelSpec.default(3, z_binary=True, y_binary=True)
        assert spec.delta.link is Link.TANH
        assert spec.delta_z.link is Link.TANH
        assert spec.mu_z.link is Link.EXPIT
        assert spec.mu_d.link is Link.EXPIT
        assert spec.mu_y.link is Link.EXPIT

    def test_default_links_continuous_instrument(self):
        spec = WorkingModelSpec.default(3, z_binary=False, y_binary=True)
        assert spec.delta_z.link is Link.IDENTITY
        assert spec.mu_z.link is Link.IDENTITY

    def test_validation_rejects_wrong_delta_link(self):
        t = small_table()  # binary outcome
        spec = WorkingModelSpec.default(2, z_binary=False, y_binary=False)
        with pytest.raises(DataError, match="delta link must be tanh"):
            spec.validate_against(t)

    def test_validation_rejects_out_of_range_columns(self):
        t = small_table()
        spec = WorkingModelSpec.default(5, z_binary=False, y_binary=True)
        with pytest.raises(DataError, match="out of range"):
            spec.validate_against(t)


class TestScenarioSpec:
    def test_all_correct_uses_full_columns(self):
        spec = ScenarioSpec(Scenario.ALL_CORRECT)
        assert all(spec.column_sets[m] == (0, 1, 2) for m in NUISANCES)

    @pytest.mark.parametrize(
        "scenario,dropped",
        [
            (Scenario.M1_CORRECT, {"delta_z", "mu_z"}),
            (Scenario.M2_CORRECT, {"delta", "mu_y"}),
            (Scenario.M3_CORRECT, {"delta_z", "mu_d", "mu_y"}),
            (Scenario.ALL_WRONG, set(NUISANCES)),
        ],
    )
    def test_misspecified_models_drop_exactly_x3(self, scenario, dropped):
        spec = ScenarioSpec(scenario)
        for m in NUISANCES:
            cols = set(spec.column_sets[m])
            if m in dropped:
                assert cols == {0, 1}, m
                assert cols < set(range(3))
            else:
                assert cols == {0, 1, 2}, m

    def test_explicit_x3_index(self):
        spec = ScenarioSpec(Scenario.ALL_WRONG, p=4, x3_index=1)
        assert spec.column_sets["delta"] == (0, 2, 3)


class TestCsv:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("y,d,z,x1,x2\n1,0,0.5,0.1,2\n0,1,-0.25,0.9,3\n", encoding="utf-8")
        t = load_csv(path)
        assert t.n == 2 and t.p == 3
        assert np.array_equal(t.x[:, 0], [1.0, 1.0])
        assert np.array_equal(t.x[:, 2], [2.0, 3.0])
        assert t.z_kind is ZKind.CONTINUOUS

    def test_binary_instrument_detected(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("y,d,z,x1\n1,0,0,0.1\n0,1,1,0.9\n", encoding="utf-8")
        t = load_csv(path)
        assert t.z_kind is ZKind.CATEGORICAL and t.z_levels == 2

    def test_missing_treatment_column(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("y,z,x1\n1,0.5,0.1\n", encoding="utf-8")
        with pytest.raises(DataError, match="treatment column absent"):
            load_csv(path)

    def test_unparseable_cell(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("y,d,z,x1\n1,0,abc,0.1\n", encoding="utf-8")
        with pytest.raises(DataError, match="cannot parse 'abc'"):
            load_csv(path)

    def test_covariates_must_be_contiguous(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("y,d,z,x1,x3\n1,0,0.5,0.1,0.2\n", encoding="utf-8")
        with pytest.raises(DataError, match="x1..xp"):
            load_csv(path)
