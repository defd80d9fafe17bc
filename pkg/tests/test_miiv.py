import json
from pathlib import Path

import numpy as np
import pytest
from typer.testing import CliRunner

from miivbma.cli import app
from miivbma.errors import IdentificationError
from miivbma.implied import model_matrices
from miivbma.miiv import (
    derive_miivs,
    disturbance_covariance,
    find_equation,
    generic_values,
    model_equations,
    transform_to_observed,
)
from miivbma.models import DisturbanceTerm, MiivSearchSettings, Offset
from miivbma.parser import parse_model, parse_model_file

DATA = Path(__file__).parent / "data"
FIXTURES = Path(__file__).parents[1] / "src" / "miivbma" / "fixtures"

runner = CliRunner()


def miivs_of(path, outcome):
    return find_equation(model_equations(parse_model_file(path)), outcome).miivs


def test_measurement_equation():
    model = parse_model_file(DATA / "cfa_misspecified.lav")
    y2 = find_equation(transform_to_observed(model), "y2")
    assert y2.kind == "measurement"
    assert y2.regressors == ["y1"]
    assert y2.coefficients == ["eta1=~y2"]
    assert y2.disturbance_terms == [
        DisturbanceTerm(kind="error", variable="y2"),
        DisturbanceTerm(kind="error", variable="y1", sign=-1, coefficient="eta1=~y2"),
    ]
    assert y2.miivs == []


def test_two_factor_cfa_equation_count():
    equations = transform_to_observed(parse_model_file(DATA / "cfa_misspecified.lav"))
    assert [equation.outcome for equation in equations] == ["y2", "y3", "y4", "y6", "y7", "y8"]
    assert [equation.equation_id for equation in equations] == list(range(6))


def test_structural_equation():
    model = parse_model_file(DATA / "structural.lav")
    equation = [e for e in transform_to_observed(model) if e.kind == "structural"][0]
    assert equation.outcome == "y4"
    assert equation.regressors == ["y1"]
    assert equation.coefficients == ["eta2~eta1"]
    assert equation.disturbance_terms == [
        DisturbanceTerm(kind="error", variable="y4"),
        DisturbanceTerm(kind="error", variable="y1", sign=-1, coefficient="eta2~eta1"),
        DisturbanceTerm(kind="disturbance", variable="eta2"),
    ]
    assert equation.disturbance == "ε(y4) - [eta2~eta1]·ε(y1) + ζ(eta2)"


def test_structural_miivs():
    model = parse_model_file(DATA / "structural.lav")
    equation = find_equation(model_equations(model), "y4")
    assert equation.miivs == ["y2", "y3"]


def test_fixed_cross_loading_becomes_offset():
    model = parse_model("f1 =~ y1 + y2 + y3\nf2 =~ y4 + y5 + y6 + 0.5*y3")
    y3 = find_equation(transform_to_observed(model), "y3")
    assert y3.regressors == ["y1"]
    assert y3.offsets == [Offset(variable="y4", value=0.5)]
    assert DisturbanceTerm(kind="error", variable="y4", sign=-1, value=0.5) in y3.disturbance_terms


@pytest.mark.parametrize(
    "path, expected",
    [
        (DATA / "sim1_true.lav", ["y4", "y5", "y6", "y7", "y8"]),
        (DATA / "sim2_true.lav", ["y3", "y4", "y6", "y7", "y8"]),
        (DATA / "cfa_misspecified.lav", ["y3", "y4", "y5", "y6", "y7", "y8"]),
    ],
    ids=["sim1-true", "sim2-true", "misspecified"],
)
def test_simulation_miivs(path, expected):
    assert miivs_of(path, "y2") == expected


@pytest.mark.parametrize(
    "fixture, outcome, expected",
    [
        ("political_democracy_stage1", "y2", ["y3", "y4", "y5", "y6", "y7", "y8"]),
        ("political_democracy_stage1", "y6", ["y1", "y2", "y3", "y4", "y7", "y8"]),
        ("political_democracy_lambda2_stage2", "y2", ["y3", "y5", "y6", "y7", "y8"]),
        ("political_democracy_lambda2_stage3", "y2", ["y3", "y5", "y7", "y8"]),
        ("political_democracy_lambda6_stage2", "y6", ["y1", "y3", "y4", "y7", "y8"]),
        ("political_democracy_lambda6_stage3", "y6", ["y1", "y3", "y4", "y7"]),
    ],
)
def test_political_democracy_miivs(fixture, outcome, expected):
    assert miivs_of(FIXTURES / f"{fixture}.lav", outcome) == expected


def test_one_factor_just_identified():
    equations = model_equations(parse_model_file(DATA / "one_factor.lav"))
    assert [(e.outcome, e.miivs) for e in equations] == [("y2", ["y3"]), ("y3", ["y2"])]
    assert not any(e.overidentified for e in equations)


def test_underidentified_names_equation():
    with pytest.raises(IdentificationError) as info:
        model_equations(parse_model_file(DATA / "underidentified.lav"))
    assert info.value.equation == "y2"


@pytest.mark.parametrize("path", ["sim1_true.lav", "structural.lav", "cfa_misspecified.lav"])
def test_generic_zero_covariances(path):
    model = parse_model_file(DATA / path)
    settings = MiivSearchSettings()
    rng = np.random.default_rng(99)
    draws = [generic_values(model, rng, settings) for _ in range(20)]
    for equation in model_equations(model):
        observed = model.observed
        covs = np.array(
            [disturbance_covariance(model_matrices(model, v), equation, v) for v in draws]
        )
        for name in equation.miivs:
            assert np.all(np.abs(covs[:, observed.index(name)]) < 1e-10)
        excluded = set(observed) - set(equation.miivs) - {equation.outcome, *equation.regressors}
        for name in excluded:
            assert np.sum(np.abs(covs[:, observed.index(name)]) > 1e-10) >= 19


@pytest.mark.parametrize("other", ["y3", "y4", "y5", "y6", "y7", "y8"])
def test_error_covariance_removes_instrument(other):
    base = (DATA / "cfa_misspecified.lav").read_text()
    before = set(miivs_of_text(base, "y2"))
    after = set(miivs_of_text(base + f"y2 ~~ {other}\n", "y2"))
    assert other not in after
    assert after <= before


def miivs_of_text(text, outcome):
    return find_equation(model_equations(parse_model(text)), outcome).miivs


def test_declaration_order_invariance():
    a = parse_model("eta1 =~ y1 + y2 + y3\neta2 =~ y4 + y5 + y6\ny2 ~~ y4")
    b = parse_model("eta2 =~ y4 + y5 + y6\ny4 ~~ y2\neta1 =~ y1 + y2 + y3")
    for outcome in ["y2", "y3", "y5", "y6"]:
        ea = find_equation(model_equations(a), outcome)
        eb = find_equation(model_equations(b), outcome)
        assert set(ea.miivs) == set(eb.miivs)


def test_derive_miivs_respects_settings():
    model = parse_model_file(DATA / "sim1_true.lav")
    equation = find_equation(transform_to_observed(model), "y2")
    settings = MiivSearchSettings(draws=5, seed=7)
    assert derive_miivs(model, equation, settings) == ["y4", "y5", "y6", "y7", "y8"]


def test_explain_miivs_json():
    result = runner.invoke(app, ["explain-miivs", str(DATA / "sim2_true.lav"), "--json"])
    assert result.exit_code == 0
    equations = json.loads(result.stdout)
    y2 = next(e for e in equations if e["outcome"] == "y2")
    assert y2["miivs"] == ["y3", "y4", "y6", "y7", "y8"]


def test_explain_miivs_table():
    result = runner.invoke(app, ["explain-miivs", str(DATA / "one_factor.lav")])
    assert result.exit_code == 0
    assert "y3" in result.stdout


def test_explain_miivs_identification_error():
    result = runner.invoke(app, ["explain-miivs", str(DATA / "underidentified.lav")])
    assert result.exit_code == 3
