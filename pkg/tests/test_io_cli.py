import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_dataset
from survey_dpd import cli
from survey_dpd.datasets import bmi_contaminated, load_bmi
from survey_dpd.io import ParseError, dataset_to_csv, dumps_report, format_float, read_dataset
from survey_dpd.objective import estimating_function, quasi_weighted_loglik

BMI_COUNTS = {  # (stratum, cluster) -> (normal, overweight, obese); cluster 1 men, 2 women
    (1, 1): (5438, 4790, 1470), (1, 2): (4910, 2878, 802),
    (2, 1): (2458, 3437, 1319), (2, 2): (3100, 1494, 1313),
    (3, 1): (1968, 3290, 1412), (3, 2): (1710, 1481, 1078),
}


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestDatasetFiles:
    def test_bmi_matches_table(self):
        data = load_bmi()
        assert data.n_clusters == 6 and len(set(data.strata.tolist())) == 3
        got = {(int(h), int(i)): tuple(int(v) for v in y)
               for h, i, y in zip(data.strata, data.clusters, data.counts)}
        assert got == BMI_COUNTS
        assert np.all(data.weights == 1.0)

    def test_bmi_loglik_at_zero(self):
        data = load_bmi()
        total = sum(sum(v) for v in BMI_COUNTS.values())
        assert quasi_weighted_loglik(np.zeros((2, 2)), data) == pytest.approx(
            -total * np.log(3), rel=1e-13)

    def test_contaminated_twin_swaps_two_counts(self):
        dirty = bmi_contaminated("men")
        row = np.flatnonzero((dirty.strata == 3) & (dirty.clusters == 1))[0]
        assert tuple(dirty.counts[row]) == (1968, 1412, 3290)

    def test_round_trip(self, tmp_path, rng):
        data, _ = random_dataset(rng)
        again = read_dataset(write(tmp_path, dataset_to_csv(data)))
        np.testing.assert_array_equal(again.counts, data.counts)
        np.testing.assert_array_equal(again.covariates, data.covariates)
        np.testing.assert_array_equal(again.weights, data.weights)

    def test_sidecar_metadata(self, tmp_path):
        p = write(tmp_path, "stratum,cluster,weight,m,count_1,count_2,x_1\n1,1,1,3,1,2,0.5\n")
        (tmp_path / "d.csv.json").write_text('{"d": 1, "k": 1}')
        data = read_dataset(p)
        np.testing.assert_array_equal(data.covariates, [[1.0, 0.5]])

    @pytest.mark.parametrize("body,line", [
        ("1,1,1,3,1,1,0.5\n", 3),          # counts do not sum to m
        ("1,1,1,3,1,2\n", 3),              # missing field
        ("1,1,1,3,1,2,0.5\n1,x,1,3,1,2,0\n", 4),
    ])
    def test_errors_carry_line_numbers(self, tmp_path, body, line):
        text = ('# {"d": 1, "k": 1}\nstratum,cluster,weight,m,count_1,count_2,x_1\n' + body)
        with pytest.raises(ParseError) as info:
            read_dataset(write(tmp_path, text))
        assert info.value.line == line

    def test_empty_and_bad_header(self, tmp_path):
        with pytest.raises(ParseError, match="empty"):
            read_dataset(write(tmp_path, ""))
        with pytest.raises(ParseError, match="header"):
            read_dataset(write(tmp_path, '# {"d": 1, "k": 1}\na,b\n'))


class TestReports:
    def test_float_format(self):
        assert format_float(0.1) == "0.10000000000000001"
        assert format_float(2.0) == "2.0" and format_float(float("nan")) == "null"

    @settings(max_examples=60, deadline=None)
    @given(st.recursive(
        st.none() | st.booleans() | st.integers(-10**6, 10**6)
        | st.floats(allow_nan=True, allow_infinity=False) | st.text(max_size=6),
        lambda kids: st.lists(kids, max_size=4) | st.dictionaries(st.text(max_size=4), kids,
                                                                   max_size=4),
        max_leaves=20))
    def test_reload_is_byte_identical(self, obj):
        text = dumps_report(obj)
        assert dumps_report(json.loads(text)) == text


class TestCommands:
    def run(self, capsys, *argv):
        code = cli.main(list(argv))
        return code, capsys.readouterr()

    def test_fit_bmi(self, capsys, tmp_path):
        out = tmp_path / "r.json"
        code, _ = self.run(capsys, "fit", "bmi", "--lambda", "0,0.5", "--per-stratum",
                           "--out", str(out))
        assert code == 0
        text = out.read_text()
        rep = json.loads(text)
        assert dumps_report(rep) == text
        beta = np.array(rep["results"][0]["fit"]["beta_hat"])
        assert np.max(np.abs(estimating_function(beta, load_bmi(), 0.0))) < 1e-6
        assert rep["results"][0]["notes"]  # unequal cluster sizes are flagged

    def test_refuse_unequal_sizes(self, capsys):
        code, err = self.run(capsys, "fit", "bmi", "--m-bar", "refuse")
        assert code == 1 and "differ" in err.err

    def test_non_convergence_exit_code(self, capsys):
        code, _ = self.run(capsys, "fit", "bmi", "--max-iter", "1", "--tol", "1e-14")
        assert code == 2

    def test_empty_file(self, capsys, tmp_path):
        code, err = self.run(capsys, "fit", write(tmp_path, ""))
        assert code == 1 and "empty" in err.err

    def test_compare_reproduces_deviation_table(self, capsys, tmp_path):
        a, b, c = (str(tmp_path / n) for n in ("a.json", "b.json", "c.json"))
        assert cli.main(["fit", "bmi-men45", "--lambda", "0", "--out", a]) == 0
        assert cli.main(["fit", "bmi", "--lambda", "0", "--out", b]) == 0
        assert cli.main(["compare", a, b, "--out", c]) == 0
        row = json.loads(open(c).read())["rows"][0]
        assert row["masd_beta"] == pytest.approx(0.24396, abs=2e-3)
        assert row["masd_pi"] == pytest.approx(0.10170, abs=2e-3)

    def test_wald_zero_at_fitted_value(self, capsys, tmp_path):
        rep = str(tmp_path / "f.json")
        cli.main(["fit", "bmi", "--out", rep])
        b = json.loads(open(rep).read())["results"][0]["fit"]["beta_hat"]
        hyp = json.dumps({"M": [[1, 0, 0, 0]], "l": [b[0][0]]})
        code, out = self.run(capsys, "test", "bmi", "--hypothesis", hyp)
        assert code == 0
        assert json.loads(out.out)["results"][0]["test"]["statistic"] == pytest.approx(0, abs=1e-12)

    def test_malformed_hypothesis(self, capsys):
        code, _ = self.run(capsys, "test", "bmi", "--hypothesis", '{"M": [[1, 0]], "l": [0]}')
        assert code == 1

    def test_influence(self, capsys):
        hyp = json.dumps({"M": [[1, 0, 0, 0]], "l": [0.0]})
        code, out = self.run(capsys, "influence", "bmi", "--lambda", "0.5", "--contamination",
                             '[{"stratum": 3, "cluster": 1, "category": 2}]', "--hypothesis", hyp)
        assert code == 0
        res = json.loads(out.out)["results"][0]
        assert len(res["if_total"]) == 4 and res["if2_wald"] >= 0

    def test_simulate_is_byte_identical(self, capsys, tmp_path):
        scen = json.dumps({"n_per_stratum": 10, "replications": 3, "lambda_grid": [0, 0.5],
                           "seed": 9})
        a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        for p in (a, b):
            assert cli.main(["simulate", "--scenario", scen, "--out", p,
                             "--summary", p + ".json"]) == 0
        assert open(a).read() == open(b).read()
        assert json.loads(open(a + ".json").read())["schema_version"] == 1

    def test_simulate_unknown_distribution(self, capsys):
        code, err = self.run(capsys, "simulate", "--scenario", '{"distribution": "poisson"}')
        assert code == 1 and "dirichlet_multinomial" in err.err

    def test_no_partial_output_on_error(self, capsys, tmp_path):
        out = tmp_path / "never.json"
        cli.main(["fit", write(tmp_path, ""), "--out", str(out)])
        assert not out.exists()
