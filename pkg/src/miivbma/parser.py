"""
Model syntax parsing pipeline.
1. Grammar: lark splits the text into one statement per line (`=~`, `~`, `~~`, `value*` prefix).
2. Transformer: statement trees become Statement objects carrying their source position.
3. Assembly: statements are checked, scaling indicators are assigned and the default free
   variances and covariances are added, giving a ModelIR.
"""

import json
from collections.abc import Iterable
from functools import cache
from itertools import combinations, groupby
from pathlib import Path

import rich
import typer
from lark import Lark, Token, Transformer
from lark.exceptions import UnexpectedInput

from miivbma.errors import ModelSpecError, ModelSyntaxError, exit_on_error
from miivbma.models import Edge, Intercept, ModelIR, Statement, Term

app = typer.Typer(pretty_exceptions_show_locals=False)

"""
Stage 1: Grammar
"""

GRAMMAR = r"""
start: (_NL | statement _NL)* statement?

statement: NAME OPERATOR term ("+" term)*
term: (NUMBER "*")? NAME

OPERATOR: /=~|~~|~/
NAME: /[A-Za-z_][A-Za-z0-9_.]*/
NUMBER: /[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?/
COMMENT: /#[^\n]*/
_NL: /\r?\n/

%ignore COMMENT
%ignore /[ \t\f]+/
"""


@cache
def get_parser() -> Lark:
    return Lark(GRAMMAR, parser="lalr")


"""
Stage 2: Transform
"""


class ModelTransformer(Transformer):
    def term(self, children):
        match children:
            case [Token("NUMBER", value), Token("NAME", name)]:
                return Term(name=str(name), value=float(value))
            case [Token("NAME", name)]:
                return Term(name=str(name))
            case _:
                raise ValueError(f"unexpected term: {children}")

    def statement(self, children):
        lhs, op, *terms = children
        return Statement(
            lhs=str(lhs), op=str(op), terms=terms, line=lhs.line, column=lhs.column
        )

    def start(self, children):
        return list(children)


def parse_statements(text: str) -> list[Statement]:
    try:
        tree = get_parser().parse(text)
    except UnexpectedInput as exc:
        line = exc.line if exc.line > 0 else None
        column = exc.column if exc.column > 0 else None
        raise ModelSyntaxError("invalid model syntax", line, column) from exc
    return ModelTransformer().transform(tree)


"""
Stage 3: Assemble
"""


def covariance_pair(a: str, b: str) -> tuple[str, str]:
    # unordered pairs are stored once, alphabetically
    return (a, b) if a <= b else (b, a)


def unique(names: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(names))


def assign_scaling(latent: str, edges: list[Edge]) -> tuple[str, list[Edge]]:
    if not any(edge.value != 0 for edge in edges):
        raise ModelSpecError(f"latent {latent} has zero indicators")
    fixed_one = [edge for edge in edges if edge.value == 1.0]
    if fixed_one:
        return fixed_one[0].rhs, edges
    first_free = next((edge for edge in edges if edge.free), None)
    if first_free is None:
        raise ModelSpecError(f"latent {latent} has no indicator that can carry its scale")
    scaled = [
        edge.model_copy(update={"value": 1.0}) if edge is first_free else edge for edge in edges
    ]
    return first_free.rhs, scaled


def build_model(statements: list[Statement], observed: Iterable[str] | None = None) -> ModelIR:
    seen: dict[tuple[str, str, str], Statement] = {}

    def check_duplicate(key, statement):
        if key in seen:
            raise ModelSpecError(
                f"line {statement.line}: duplicate edge {key[0]} {key[1]} {key[2]} "
                f"(first declared on line {seen[key].line})"
            )
        seen[key] = statement

    latents = unique(s.lhs for s in statements if s.op == "=~")
    latent_set = set(latents)

    loadings = []
    for statement in statements:
        if statement.op != "=~":
            continue
        for term in statement.terms:
            if term.name in latent_set:
                raise ModelSpecError(
                    f"line {statement.line}: {term.name} is latent, higher-order factors "
                    "are not supported"
                )
            check_duplicate((statement.lhs, "=~", term.name), statement)
            loadings.append(Edge(lhs=statement.lhs, op="=~", rhs=term.name, value=term.value))

    indicators = unique(edge.rhs for edge in loadings)
    indicator_set = set(indicators)

    regressions = []
    for statement in statements:
        if statement.op != "~":
            continue
        for name in [statement.lhs] + [term.name for term in statement.terms]:
            if name in indicator_set:
                raise ModelSpecError(
                    f"line {statement.line}: indicator {name} cannot appear in a regression"
                )
        for term in statement.terms:
            if term.name == statement.lhs:
                raise ModelSpecError(f"line {statement.line}: {term.name} regressed on itself")
            check_duplicate((statement.lhs, "~", term.name), statement)
            regressions.append(
                Edge(lhs=statement.lhs, op="~", rhs=term.name, value=term.value)
            )

    structural = unique(
        name
        for edge in regressions
        for name in (edge.lhs, edge.rhs)
        if name not in latent_set
    )
    factors = latents + structural
    factor_set = set(factors)
    known = latent_set | indicator_set | set(structural)

    covariances = []
    for statement in statements:
        if statement.op != "~~":
            continue
        for term in statement.terms:
            for name in (statement.lhs, term.name):
                if name not in known:
                    raise ModelSpecError(f"line {statement.line}: unknown variable {name}")
            a, b = covariance_pair(statement.lhs, term.name)
            if not ({a, b} <= factor_set or {a, b} <= indicator_set):
                raise ModelSpecError(
                    f"line {statement.line}: {a} ~~ {b} mixes a factor with a measurement error"
                )
            check_duplicate((a, "~~", b), statement)
            covariances.append(Edge(lhs=a, op="~~", rhs=b, value=term.value))

    if not factors:
        raise ModelSpecError("model declares no latent variables or regressions")

    observed_names = indicators + structural
    if observed is not None:
        available = set(observed)
        missing = [name for name in observed_names if name not in available]
        if missing:
            raise ModelSpecError(f"unknown variable {missing[0]}")

    scaling = {}
    scaled_loadings = []
    for latent in latents:
        edges = [edge for edge in loadings if edge.lhs == latent]
        scaling[latent], edges = assign_scaling(latent, edges)
        scaled_loadings.extend(edges)
    # keep the declaration order of the loadings
    by_key = {(edge.lhs, edge.rhs): edge for edge in scaled_loadings}
    loadings = [by_key[(edge.lhs, edge.rhs)] for edge in loadings]

    for latent, indicator in scaling.items():
        others = [
            e.lhs for e in loadings if e.rhs == indicator and e.lhs != latent and e.value != 0
        ]
        if others:
            raise ModelSpecError(
                f"scaling indicator {indicator} of {latent} also loads on {', '.join(others)}"
            )

    declared = {(edge.lhs, edge.rhs) for edge in covariances}
    outcomes = {edge.lhs for edge in regressions}
    exogenous = [name for name in factors if name not in outcomes]
    defaults = [(name, name) for name in indicators + factors]
    defaults += list(combinations(exogenous, 2))
    for a, b in defaults:
        pair = covariance_pair(a, b)
        if pair not in declared:
            covariances.append(Edge(lhs=pair[0], op="~~", rhs=pair[1]))
            declared.add(pair)

    scaling_indicators = set(scaling.values())
    intercepts = [
        Intercept(variable=name, value=0.0 if name in scaling_indicators else None)
        for name in observed_names
    ]
    intercepts += [Intercept(variable=name) for name in latents if name in outcomes]

    return ModelIR(
        latents=latents,
        observed=observed_names,
        loadings=loadings,
        regressions=regressions,
        covariances=covariances,
        intercepts=intercepts,
        scaling=scaling,
    )


def parse_model(text: str, observed: Iterable[str] | None = None) -> ModelIR:
    """
    Parse model syntax into a validated ModelIR.

    Args:
        text: one statement per line, `#` comments allowed
        observed: optional names available in the data; other observed names are rejected

    Returns:
        ModelIR with scaling indicators and default free parameters assigned
    """
    return build_model(parse_statements(text), observed)


def parse_model_file(path: Path, observed: Iterable[str] | None = None) -> ModelIR:
    return parse_model(Path(path).read_text(encoding="utf-8"), observed)


"""
Printing
"""


def format_term(edge: Edge) -> str:
    return edge.rhs if edge.free else f"{edge.value!r}*{edge.rhs}"


def format_model(model: ModelIR) -> str:
    lines = []
    for edges in (model.loadings, model.regressions):
        for (lhs, op), group in groupby(edges, key=lambda edge: (edge.lhs, edge.op)):
            lines.append(f"{lhs} {op} " + " + ".join(format_term(edge) for edge in group))
    lines += [f"{edge.lhs} ~~ {format_term(edge)}" for edge in model.covariances]
    return "\n".join(lines) + "\n"


def to_canonical_json(model: ModelIR) -> str:
    return json.dumps(model.model_dump(), sort_keys=True, indent=2)


def free_parameters(model: ModelIR) -> list[str]:
    edges = model.loadings + model.regressions + model.covariances
    return [edge.ref for edge in edges if edge.free]


@app.command("parse")
def parse_and_print(path: Path, json_output: bool = typer.Option(False, "--json")):
    with exit_on_error():
        model = parse_model_file(path)
    if json_output:
        print(to_canonical_json(model))
    else:
        rich.print(model)
        rich.print(
            f"{len(model.latents)} latents, {len(model.observed)} observed, "
            f"{len(free_parameters(model))} free parameters"
        )


if __name__ == "__main__":
    app()
