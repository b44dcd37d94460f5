"""Sort-and-Select MILP in CPLEX LP format, plus an LP reader and a solution auditor.

Variable naming uses positional indices (flow ``F``, tunnel ``T``, scenario
``Q`` in canonical order, rank ``R``):

====================  ==========================================================
``x_f{F}_t{T}``       split ratio of tunnel T (which belongs to flow F)
``l_f{F}_q{Q}``       loss of flow F in scenario Q, in [0, 1]
``d_f{F}_q{Q}_r{R}``  binary, scenario Q sits at rank R for unit F
``v_f{F}_r{R}``       loss at rank R
``pi_f{F}_r{R}``      probability at rank R
``G_f{F}_r{R}``       cumulative probability up to rank R
``I_f{F}_r{R}``       binary rank mask (tail objectives)
``A_f{F}_r{R}``       binary, cumulative probability reached 1 - beta (quantile)
``u_f{F}_r{R}``       product I * v
``o_f{F}_q{Q}_r{R}``  product d * u, weighted by p_Q in the objective
``k_f{F}_q{Q}``       binary, loss of flow F in Q is on its sloped branch
====================  ==========================================================

With scenario granularity the permutation of every flow is tied to flow 0
and the ordering rows compare rank sums over flows, which sorts the
scenario-average losses while keeping one permutation block per flow.
"""

from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Instance
from .risk import RiskSpec, flow_losses, objective, objective_for_order, sort_losses
from .scenarios import ScenarioSet

VERIFY_TOL = 1e-6
# strictness gap for the Gamma-vs-(1 - beta) indicator rows
MASK_EPS = 1e-7
SORT_FAMILIES = ("perm_row", "perm_col", "sort_upper", "sort_lower", "sort_order",
                 "rank_prob", "cum_prob")


class MilpError(ValueError):
    pass


@dataclass
class Var:
    name: str
    lb: float = 0.0
    ub: float = math.inf
    binary: bool = False


@dataclass
class Constraint:
    name: str
    family: str
    terms: list[tuple[str, float]]
    sense: str  # "<=", ">=" or "="
    rhs: float

    def activity(self, values: dict[str, float]) -> float:
        return math.fsum(c * values[v] for v, c in self.terms)

    def violation(self, values: dict[str, float]) -> float:
        a = self.activity(values)
        if self.sense == "<=":
            return max(0.0, a - self.rhs)
        if self.sense == ">=":
            return max(0.0, self.rhs - a)
        return abs(a - self.rhs)


@dataclass
class MilpModel:
    spec: RiskSpec
    n_flows: int
    n_tunnels: int
    n_edges: int
    n_scenarios: int
    big_m: float
    clamp_m: float | None
    variables: dict[str, Var] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)
    objective: list[tuple[str, float]] = field(default_factory=list)
    tunnel_flow: tuple[int, ...] = ()
    header: list[str] = field(default_factory=list)

    def add_var(self, name: str, lb: float = 0.0, ub: float = math.inf, binary: bool = False):
        if name in self.variables:
            raise MilpError(f"duplicate variable {name}")
        self.variables[name] = Var(name, lb, ub, binary)
        return name

    def add(self, name: str, family: str, terms, sense: str, rhs: float):
        self.constraints.append(Constraint(name, family, list(terms), sense, float(rhs)))

    @property
    def binaries(self) -> list[str]:
        return [v.name for v in self.variables.values() if v.binary]

    @property
    def delta_names(self) -> list[str]:
        return [n for n in self.variables if n.startswith("d_")]

    @property
    def families(self) -> set[str]:
        return {c.family for c in self.constraints}

    def family_count(self, family: str) -> int:
        return sum(c.family == family for c in self.constraints)

    def objective_value(self, values: dict[str, float]) -> float:
        return math.fsum(c * values[v] for v, c in self.objective)


def xname(f, t): return f"x_f{f}_t{t}"
def lname(f, q): return f"l_f{f}_q{q}"
def dname(f, q, r): return f"d_f{f}_q{q}_r{r}"
def vname(f, r): return f"v_f{f}_r{r}"
def pname(f, r): return f"pi_f{f}_r{r}"
def gname(f, r): return f"G_f{f}_r{r}"
def iname(f, r): return f"I_f{f}_r{r}"
def aname(f, r): return f"A_f{f}_r{r}"
def uname(f, r): return f"u_f{f}_r{r}"
def oname(f, q, r): return f"o_f{f}_q{q}_r{r}"
def kname(f, q): return f"k_f{f}_q{q}"


def tunnel_upper_bounds(instance: Instance) -> np.ndarray:
    """x_t <= min_e C_e / D_f, implied by capacity; zero-demand flows get 0."""
    ub = np.zeros(instance.n_tunnels)
    for t, tun in enumerate(instance.tunnels):
        d = instance.demand[instance.tunnel_flow[t]]
        if d > 0:
            ub[t] = min(instance.network.edges[instance.network.edge_index[e]].capacity
                        for e in tun.edges) / d
    return ub


def build_milp(instance: Instance, sset: ScenarioSet, spec: RiskSpec, big_m: float = 1.0,
               strict_clamp: bool | None = None) -> MilpModel:
    """The unified risk MILP for an instance, scenario set and objective.

    ``strict_clamp`` adds binaries forcing l = max(0, 1 - served) exactly.
    It defaults to on for cvar and quantile, whose objectives are not
    monotone in the losses; for robust and expectation the one-sided rows
    are exact at any optimum.
    """
    if sset.n < 1:
        raise MilpError("need at least one scenario")
    if sset.alpha is None or sset.alpha.shape[0] != instance.n_tunnels:
        raise MilpError("scenario set has no survival matrix for this instance")
    if big_m < 1.0:
        raise MilpError("big-M must be at least 1 since losses lie in [0, 1]")
    if spec.exact_cvar:
        raise MilpError("the fractional cvar boundary weight has no MILP encoding here")
    tail_kind = spec.kind in ("cvar", "quantile")
    strict = tail_kind if strict_clamp is None else strict_clamp
    F, N, T = instance.n_flows, sset.n, instance.n_tunnels
    if F == 0:
        raise MilpError("instance has no flows")
    ub = tunnel_upper_bounds(instance)
    tf = instance.tunnel_flow
    clamp_m = None
    if strict:
        per_flow = np.bincount(tf, weights=ub, minlength=F)
        clamp_m = float(max(1.0, per_flow.max()))
    m = MilpModel(spec, F, T, instance.n_edges, N, big_m, clamp_m, tunnel_flow=tuple(int(v) for v in tf))
    M = big_m
    scen = spec.granularity == "scenario"
    scale = 1.0 / F if scen else 1.0
    tail = 1.0 - spec.beta
    p = sset.probs
    alpha = sset.alpha

    m.header = [
        f"risk objective: {spec.kind} beta={spec.beta!r} granularity={spec.granularity}",
        f"flows={F} tunnels={T} edges={instance.n_edges} scenarios={N}",
        f"big-M={big_m!r} clamp-M={clamp_m!r} mask-eps={MASK_EPS!r}",
        "loss rows: l + sum x*alpha >= 1 (0 for zero-demand flows)",
        "u = I*v linearized by u<=v, u<=M*I, u>=v-M*(1-I); o >= u-(1-d)",
        "cvar mask: I=1 iff G<=1-beta; quantile mask: I_r = A_r - A_(r-1), A_r=1 iff G_r>=1-beta",
    ]
    for t in range(T):
        m.add_var(xname(tf[t], t), 0.0, float(ub[t]))
    for f in range(F):
        for q in range(N):
            m.add_var(lname(f, q), 0.0, 1.0)
    for f in range(F):
        for q in range(N):
            for r in range(N):
                m.add_var(dname(f, q, r), 0.0, 1.0, binary=True)
    for f in range(F):
        for r in range(N):
            m.add_var(vname(f, r), 0.0, 1.0)
            m.add_var(pname(f, r), 0.0, 1.0)
            m.add_var(gname(f, r), 0.0, 1.0)

    # capacity and losses
    dem_t = instance.demand[tf]
    by_edge = defaultdict(list)
    for t, e in zip(instance.pair_tunnel, instance.pair_edge):
        by_edge[int(e)].append(int(t))
    for e in range(instance.n_edges):
        terms = [(xname(tf[t], t), float(dem_t[t])) for t in by_edge.get(e, []) if dem_t[t] != 0]
        if terms:
            m.add(f"cap_e{e}", "capacity", terms, "<=", instance.capacity[e])
    for f in range(F):
        tunnels = np.nonzero(tf == f)[0]
        need = float(instance.need[f])
        for q in range(N):
            served = [(xname(f, t), float(alpha[t, q])) for t in tunnels if alpha[t, q] != 0]
            m.add(f"loss_f{f}_q{q}", "loss", [(lname(f, q), 1.0)] + served, ">=", need)
            if strict:
                k = m.add_var(kname(f, q), binary=True, ub=1.0)
                m.add(f"clamp_hi_f{f}_q{q}", "clamp_upper",
                      [(lname(f, q), 1.0)] + served + [(k, clamp_m)], "<=", need + clamp_m)
                m.add(f"clamp_on_f{f}_q{q}", "clamp_active", [(lname(f, q), 1.0), (k, -1.0)],
                      "<=", 0.0)

    # sorting
    for f in range(F):
        for q in range(N):
            m.add(f"perm_row_f{f}_q{q}", "perm_row", [(dname(f, q, r), 1.0) for r in range(N)],
                  "=", 1.0)
        for r in range(N):
            m.add(f"perm_col_f{f}_r{r}", "perm_col", [(dname(f, q, r), 1.0) for q in range(N)],
                  "=", 1.0)
        for q in range(N):
            for r in range(N):
                # v_r - l_q <= M (1 - d)  and  v_r - l_q >= -M (1 - d)
                m.add(f"sort_hi_f{f}_q{q}_r{r}", "sort_upper",
                      [(vname(f, r), 1.0), (lname(f, q), -1.0), (dname(f, q, r), M)], "<=", M)
                m.add(f"sort_lo_f{f}_q{q}_r{r}", "sort_lower",
                      [(vname(f, r), 1.0), (lname(f, q), -1.0), (dname(f, q, r), -M)], ">=", -M)
        if scen and f > 0:
            for q in range(N):
                for r in range(N):
                    m.add(f"link_f{f}_q{q}_r{r}", "delta_link",
                          [(dname(f, q, r), 1.0), (dname(0, q, r), -1.0)], "=", 0.0)
        for r in range(N):
            m.add(f"rank_prob_f{f}_r{r}", "rank_prob",
                  [(pname(f, r), 1.0)] + [(dname(f, q, r), -float(p[q])) for q in range(N)],
                  "=", 0.0)
            m.add(f"cum_prob_f{f}_r{r}", "cum_prob",
                  [(gname(f, r), 1.0)] + [(pname(f, s), -1.0) for s in range(r + 1)], "=", 0.0)
    for r in range(N - 1):
        if scen:
            terms = [(vname(f, r), 1.0) for f in range(F)] + \
                    [(vname(f, r + 1), -1.0) for f in range(F)]
            m.add(f"order_r{r}", "sort_order", terms, ">=", 0.0)
        else:
            for f in range(F):
                m.add(f"order_f{f}_r{r}", "sort_order",
                      [(vname(f, r), 1.0), (vname(f, r + 1), -1.0)], ">=", 0.0)

    # objective
    if spec.kind == "expectation":
        m.objective = [(lname(f, q), scale * float(p[q])) for f in range(F) for q in range(N)]
    elif spec.kind == "robust":
        m.objective = [(vname(f, 0), scale) for f in range(F)]
    else:
        for f in range(F):
            for r in range(N):
                i = m.add_var(iname(f, r), 0.0, 1.0, binary=True)
                u = m.add_var(uname(f, r), 0.0, M)
                m.add(f"prod_v_f{f}_r{r}", "prod_upper_v", [(u, 1.0), (vname(f, r), -1.0)], "<=", 0.0)
                m.add(f"prod_i_f{f}_r{r}", "prod_upper_i", [(u, 1.0), (i, -M)], "<=", 0.0)
                m.add(f"prod_lo_f{f}_r{r}", "prod_lower",
                      [(u, 1.0), (vname(f, r), -1.0), (i, -M)], ">=", -M)
                for q in range(N):
                    o = m.add_var(oname(f, q, r), 0.0, M)
                    m.add(f"omega_f{f}_q{q}_r{r}", "omega",
                          [(o, 1.0), (u, -1.0), (dname(f, q, r), -1.0)], ">=", -1.0)
                    m.objective.append((o, scale * float(p[q])))
            if spec.kind == "cvar":
                for r in range(N):
                    g, i = gname(f, r), iname(f, r)
                    # I = 1 -> G <= tail;  I = 0 -> G >= tail + eps
                    m.add(f"mask_hi_f{f}_r{r}", "mask_upper", [(g, 1.0), (i, 1.0)], "<=", tail + 1.0)
                    m.add(f"mask_lo_f{f}_r{r}", "mask_lower", [(g, 1.0), (i, tail + MASK_EPS)],
                          ">=", tail + MASK_EPS)
            else:
                for r in range(N):
                    g, a = gname(f, r), m.add_var(aname(f, r), 0.0, 1.0, binary=True)
                    # A = 1 -> G >= tail;  A = 0 -> G <= tail - eps
                    m.add(f"tail_lo_f{f}_r{r}", "tail_lower", [(g, 1.0), (a, -1.0)], ">=", tail - 1.0)
                    m.add(f"tail_hi_f{f}_r{r}", "tail_upper", [(g, 1.0), (a, -1.0)], "<=",
                          tail - MASK_EPS)
                    terms = [(iname(f, r), 1.0), (a, -1.0)]
                    if r > 0:
                        terms.append((aname(f, r - 1), 1.0))
                    m.add(f"select_f{f}_r{r}", "mask_select", terms, "=", 0.0)
    return m


# -- LP text ------------------------------------------------------------------------


def _num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _expr(terms, per_line: int = 6) -> list[str]:
    chunks = []
    for i, (name, c) in enumerate(terms):
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        coef = "" if mag == 1 else _num(mag) + " "
        if i == 0:
            chunks.append(("- " if c < 0 else "") + coef + name)
        else:
            chunks.append(f"{sign} {coef}{name}")
    if not chunks:
        raise MilpError("empty linear expression")
    return [" ".join(chunks[i:i + per_line]) for i in range(0, len(chunks), per_line)]


def lp_text(model: MilpModel) -> str:
    out = [f"\\ {line}" for line in model.header]
    out.append("Minimize")
    obj = _expr(model.objective)
    out.append(" obj: " + obj[0])
    out += ["   " + s for s in obj[1:]]
    out.append("Subject To")
    for c in model.constraints:
        body = _expr(c.terms)
        out.append(f" {c.name}: {body[0]}")
        out += ["   " + s for s in body[1:]]
        out[-1] += f" {c.sense} {_num(c.rhs)}"
    out.append("Bounds")
    for v in model.variables.values():
        if v.binary:
            continue
        hi = "+inf" if math.isinf(v.ub) else _num(v.ub)
        out.append(f" {_num(v.lb)} <= {v.name} <= {hi}")
    out.append("Binaries")
    names = model.binaries
    for i in range(0, len(names), 8):
        out.append(" " + " ".join(names[i:i + 8]))
    out.append("End")
    return "\n".join(out) + "\n"


def write_lp(model: MilpModel, path: str | Path) -> None:
    Path(path).write_text(lp_text(model), encoding="utf-8")


@dataclass
class ParsedLp:
    objective: dict[str, float]
    constraints: list[tuple[str, dict[str, float], str, float]]
    bounds: dict[str, tuple[float, float]]
    binaries: list[str]

    @property
    def variables(self) -> list[str]:
        seen = dict.fromkeys(self.objective)
        for _, terms, _, _ in self.constraints:
            seen.update(dict.fromkeys(terms))
        seen.update(dict.fromkeys(self.bounds))
        seen.update(dict.fromkeys(self.binaries))
        return list(seen)


_TERM = re.compile(r"([+-])?\s*([0-9.eE+-]+)?\s*([A-Za-z_][A-Za-z0-9_]*)")


def _parse_terms(text: str) -> dict[str, float]:
    terms: dict[str, float] = {}
    text = text.strip()
    pos = 0
    while pos < len(text):
        mt = _TERM.match(text, pos)
        if not mt:
            raise MilpError(f"cannot parse LP expression near {text[pos:pos + 30]!r}")
        sign, coef, name = mt.groups()
        c = float(coef) if coef else 1.0
        if sign == "-":
            c = -c
        terms[name] = terms.get(name, 0.0) + c
        pos = mt.end()
        while pos < len(text) and text[pos] == " ":
            pos += 1
    return terms


def parse_lp(text: str) -> ParsedLp:
    """Read the LP subset emitted by :func:`lp_text`."""
    section = None
    buf: list[str] = []
    objective: dict[str, float] = {}
    constraints = []
    bounds = {}
    binaries: list[str] = []

    def flush():
        if not buf:
            return
        stmt = " ".join(buf)
        buf.clear()
        name, _, body = stmt.partition(":")
        if section == "obj":
            objective.update(_parse_terms(body))
            return
        mt = re.match(r"(.*?)\s*(<=|>=|=)\s*(\S+)\s*$", body)
        if not mt:
            raise MilpError(f"malformed constraint {name.strip()!r}")
        constraints.append((name.strip(), _parse_terms(mt.group(1)), mt.group(2),
                            float(mt.group(3))))

    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        low = line.lower()
        if low in ("minimize", "subject to", "bounds", "binaries", "end"):
            flush()
            section = {"minimize": "obj", "subject to": "st", "bounds": "bounds",
                       "binaries": "bin", "end": None}[low]
            continue
        if section in ("obj", "st"):
            if ":" in line and buf:
                flush()
            buf.append(line)
        elif section == "bounds":
            mt = re.match(r"(\S+)\s*<=\s*(\S+)\s*<=\s*(\S+)$", line)
            if not mt:
                raise MilpError(f"malformed bound {line!r}")
            lo, name, hi = mt.groups()
            bounds[name] = (float(lo), math.inf if hi == "+inf" else float(hi))
        elif section == "bin":
            binaries += line.split()
    flush()
    return ParsedLp(objective, constraints, bounds, binaries)


def read_lp(path: str | Path) -> ParsedLp:
    return parse_lp(Path(path).read_text(encoding="utf-8"))


# -- solutions --------------------------------------------------------------------


def read_solution(path: str | Path) -> dict[str, float]:
    """Plain ``name value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MilpError(f"{path}:{n}: expected 'name value'")
        try:
            values[parts[0]] = float(parts[1])
        except ValueError as exc:
            raise MilpError(f"{path}:{n}: bad value {parts[1]!r}") from exc
    return values


def write_solution(values: dict[str, float], path: str | Path) -> None:
    Path(path).write_text("".join(f"{k} {v!r}\n" for k, v in values.items()), encoding="utf-8")


def extract_allocation(model: MilpModel, values: dict[str, float]) -> np.ndarray:
    return np.array([values[xname(f, t)] for t, f in enumerate(model.tunnel_flow)])


def solution_from_allocation(model: MilpModel, instance: Instance, sset: ScenarioSet,
                             x: np.ndarray) -> dict[str, float]:
    """Complete, consistent assignment of every model variable for allocation ``x``."""
    spec = model.spec
    F, N = model.n_flows, model.n_scenarios
    x = np.asarray(x, dtype=float)
    per_flow = flow_losses(x, sset.alpha, instance)
    values = {xname(f, t): float(x[t]) for t, f in enumerate(model.tunnel_flow)}
    for f in range(F):
        for q in range(N):
            values[lname(f, q)] = float(per_flow[f, q])
    if spec.granularity == "scenario":
        sl = sort_losses(per_flow.mean(axis=0), sset.probs)
        orders = [sl.order] * F
    else:
        orders = [sort_losses(per_flow[f], sset.probs).order for f in range(F)]
    tail = 1.0 - spec.beta
    for f in range(F):
        order = orders[f]
        pi = sset.probs[order]
        gam = np.cumsum(pi)
        for q in range(N):
            for r in range(N):
                values[dname(f, q, r)] = 1.0 if order[r] == q else 0.0
        for r in range(N):
            values[vname(f, r)] = float(per_flow[f, order[r]])
            values[pname(f, r)] = float(pi[r])
            values[gname(f, r)] = float(gam[r])
        if spec.kind in ("cvar", "quantile"):
            if spec.kind == "cvar":
                mask = gam <= tail + 1e-12
            else:
                reached = gam >= tail - 1e-12
                mask = reached & np.r_[True, ~reached[:-1]]
                for r in range(N):
                    values[aname(f, r)] = float(reached[r])
            for r in range(N):
                u = float(mask[r]) * values[vname(f, r)]
                values[iname(f, r)] = float(mask[r])
                values[uname(f, r)] = u
                for q in range(N):
                    values[oname(f, q, r)] = u * values[dname(f, q, r)]
        if model.clamp_m is not None:
            served = instance.flow_tunnel_matrix[f] @ (x[:, None] * sset.alpha)
            for q in range(N):
                values[kname(f, q)] = float(served[q] < instance.need[f])
    return values


@dataclass
class Violation:
    item: str
    family: str
    amount: float


@dataclass
class VerifyReport:
    ok: bool
    violations: list[Violation]
    J_model: float | None
    J_recomputed: float | None
    J_canonical: float | None = None

    def families(self) -> set[str]:
        return {v.family for v in self.violations}

    def summary(self) -> str:
        if self.ok:
            return f"feasible; J={self.J_model!r} (recomputed {self.J_recomputed!r})"
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [f"  {v.family}: {v.item} by {v.amount:.3g}" for v in self.violations]
        return "\n".join(lines)


def verify_solution(model: MilpModel, values: dict[str, float] | str | Path,
                    instance: Instance | None = None, sset: ScenarioSet | None = None,
                    tol: float = VERIFY_TOL) -> VerifyReport:
    """Audit a solution: bounds, integrality, every row, the sort, and J.

    With ``instance`` and ``sset`` given, J is also recomputed from the
    solution's allocation through the risk objective, ranking scenarios in
    the solution's own order (ties may be ordered either way).
    ``J_canonical`` uses the stable tie order instead and is informational.
    """
    if not isinstance(values, dict):
        values = read_solution(values)
    missing = [n for n in model.variables if n not in values]
    if missing:
        return VerifyReport(False, [Violation(n, "missing", math.inf) for n in missing], None, None)
    bad: list[Violation] = []
    for v in model.variables.values():
        val = values[v.name]
        if not math.isfinite(val):
            bad.append(Violation(v.name, "bounds", math.inf))
            continue
        over = max(v.lb - val, val - v.ub, 0.0)
        if over > tol:
            bad.append(Violation(v.name, "bounds", over))
        if v.binary and min(abs(val), abs(val - 1.0)) > tol:
            bad.append(Violation(v.name, "integrality", min(abs(val), abs(val - 1.0))))
    for c in model.constraints:
        amount = c.violation(values)
        if amount > tol:
            bad.append(Violation(c.name, c.family, amount))
    bad += _check_sorted(model, values, tol)
    J_model = model.objective_value(values)
    J_re = J_can = None
    if instance is not None and sset is not None and not bad:
        x = extract_allocation(model, values)
        per_flow = flow_losses(x, sset.alpha, instance)
        J_re = objective_for_order(per_flow, sset.probs, model.spec,
                                   _true_order(model, per_flow, values))
        J_can = objective(x, sset, model.spec, instance)
        if abs(J_re - J_model) > tol:
            bad.append(Violation("objective", "objective", abs(J_re - J_model)))
    return VerifyReport(not bad, bad, J_model, J_re, J_can)


def solution_order(model: MilpModel, values: dict[str, float]) -> np.ndarray:
    """Scenario index at each rank, read off the delta variables."""
    F, N = model.n_flows, model.n_scenarios
    order = np.array([[max(range(N), key=lambda q: values[dname(f, q, r)]) for r in range(N)]
                      for f in range(F)])
    return order[0] if model.spec.granularity == "scenario" else order


def _true_order(model: MilpModel, per_flow: np.ndarray, values: dict[str, float]) -> np.ndarray:
    """Descending sort of the true losses; ties (to 1e-9) follow the solution's ranks."""
    sol = solution_order(model, values)
    units = per_flow.mean(axis=0) if model.spec.granularity == "scenario" else per_flow
    rank = np.argsort(sol, axis=-1)
    key = np.round(units * 1e9)
    if units.ndim == 1:
        return np.lexsort((rank, -key))
    return np.array([np.lexsort((rank[f], -key[f])) for f in range(len(units))])


def _check_sorted(model: MilpModel, values: dict[str, float], tol: float) -> list[Violation]:
    """v must equal the losses sorted independently in descending order."""
    F, N = model.n_flows, model.n_scenarios
    loss = np.array([[values[lname(f, q)] for q in range(N)] for f in range(F)])
    v = np.array([[values[vname(f, r)] for r in range(N)] for f in range(F)])
    out = []
    if model.spec.granularity == "scenario":
        ref = np.sort(loss.mean(axis=0))[::-1]
        gap = np.abs(v.mean(axis=0) - ref)
        for r in np.nonzero(gap > tol)[0]:
            out.append(Violation(f"rank {r}", "sort_check", float(gap[r])))
    else:
        ref = np.sort(loss, axis=1)[:, ::-1]
        gap = np.abs(v - ref)
        for f, r in zip(*np.nonzero(gap > tol)):
            out.append(Violation(f"flow {f} rank {r}", "sort_check", float(gap[f, r])))
    return out


def closed_form_counts(model: MilpModel) -> dict[str, int]:
    """Expected variable and row counts as functions of |F|, N, |T| and |E|."""
    F, N, T = model.n_flows, model.n_scenarios, model.n_tunnels
    scen = model.spec.granularity == "scenario"
    counts = {
        "x": T, "l": F * N, "d": F * N * N, "v": F * N, "pi": F * N, "G": F * N,
        "perm_row": F * N, "perm_col": F * N, "sort_upper": F * N * N, "sort_lower": F * N * N,
        "sort_order": (N - 1) if scen else F * (N - 1),
        "rank_prob": F * N, "cum_prob": F * N, "loss": F * N,
    }
    if scen and F > 1:
        counts["delta_link"] = (F - 1) * N * N
    if model.spec.kind in ("cvar", "quantile"):
        counts.update(I=F * N, u=F * N, o=F * N * N, omega=F * N * N, prod_upper_v=F * N,
                      prod_upper_i=F * N, prod_lower=F * N)
    if model.spec.kind == "cvar":
        counts.update(mask_upper=F * N, mask_lower=F * N)
    if model.spec.kind == "quantile":
        counts.update(A=F * N, tail_lower=F * N, tail_upper=F * N, mask_select=F * N)
    if model.clamp_m is not None:
        counts.update(k=F * N, clamp_upper=F * N, clamp_active=F * N)
    return counts


def model_counts(model: MilpModel) -> dict[str, int]:
    counts: dict[str, int] = defaultdict(int)
    for name in model.variables:
        counts[name.split("_", 1)[0]] += 1
    for c in model.constraints:
        counts[c.family] += 1
    return dict(counts)
