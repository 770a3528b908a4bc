"""Two-stage game orchestration with an explicit message contract.

The grid announces its deficiency and price budget; sellers adopt the
uniform per-user price, then iterate their coupled best responses, offering
energies and reporting slack values each round while the grid answers with
a single repeat bit. Once the offers settle, the grid optimizes the price
vector against them, broadcasts per-user price updates, and the sellers
iterate once more at the new prices. Every message is recorded, so the
exchange can be replayed or audited against the round grammar

    (announce offer* slack* repeat)*  price*  (offer* slack* repeat)*

The grid's stop rule mirrors the slack-equalization idea: it stops a stage
when the interior slack values agree within tolerance AND have stopped
moving between rounds (equal slacks alone are not sufficient: with one
seller, or symmetric sellers, they agree from the first round at any
allocation), or when the solver's own residual test fires first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import (
    EquilibriumResult,
    FeasibleSet,
    Scenario,
    grid_cost,
    validate_scenario,
)
from .price_opt import optimize_prices
from .vi_solver import PseudoGradient, SolverConfig, solve_ve

PG = "pg"

_KIND_FIELDS = {
    "announce": {"deficiency", "total_price", "n_users"},
    "offer": {"eu_id", "energy"},
    "slack_report": {"eu_id", "slack"},
    "repeat_bit": {"repeat"},
    "price_update": {"eu_id", "price"},
}


class ScenarioValidationError(ValueError):
    """run_stackelberg was handed a scenario that fails validation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    kind: str
    payload: dict

    def __post_init__(self):
        fields = _KIND_FIELDS.get(self.kind)
        if fields is None:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if set(self.payload) != fields:
            raise ValueError(f"{self.kind} payload must have fields {sorted(fields)}")
        if self.kind == "repeat_bit" and not isinstance(self.payload["repeat"], bool):
            raise ValueError("repeat_bit carries exactly one boolean")


@dataclass
class MessageLog:
    """Append-only transcript; round numbers never decrease."""

    messages: list[Message] = field(default_factory=list)

    def append(self, message: Message) -> None:
        if self.messages and message.round < self.messages[-1].round:
            raise ValueError(
                f"round {message.round} precedes current round {self.messages[-1].round}"
            )
        self.messages.append(message)

    @property
    def total_rounds(self) -> int:
        return self.messages[-1].round if self.messages else 0

    @property
    def per_eu_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for m in self.messages:
            if m.sender.startswith("eu:"):
                counts[int(m.sender[3:])] = counts.get(int(m.sender[3:]), 0) + 1
        return counts

    def to_jsonl(self) -> str:
        return "\n".join(
            json.dumps(
                {"round": m.round, "sender": m.sender, "kind": m.kind, "payload": m.payload},
                sort_keys=True,
            )
            for m in self.messages
        )


@dataclass(frozen=True)
class GameOutcome:
    stage1: EquilibriumResult
    stage2: EquilibriumResult | None
    log: MessageLog
    converged: bool


@dataclass(frozen=True)
class NSEReport:
    """Unilateral-deviation audit of a converged outcome."""

    follower_trials: int
    follower_violations: int
    max_follower_improvement: float
    leader_trials: int
    leader_violations: int
    max_leader_improvement: float
    tolerance: float

    @property
    def clean(self) -> bool:
        return self.follower_violations == 0 and self.leader_violations == 0


def _interior_mu_stop(x, mu, prev_mu, upper_bounds):
    """Slack-equalization stop: interior spread within tolerance and slack
    values stationary between rounds."""
    if prev_mu is None:
        return False
    margin = 1e-6 * np.maximum(1.0, upper_bounds)
    interior = (x > margin) & (x < upper_bounds - margin)
    if interior.sum() >= 2:
        vals = mu[interior]
        tol = 1e-6 * (1.0 + abs(float(vals.mean())))
        spread = float(vals.max() - vals.min())
    else:
        tol = 1e-6 * (1.0 + float(np.abs(mu).max()))
        spread = 0.0
    stationary = float(np.abs(mu - prev_mu).max()) <= tol
    return stationary and spread <= tol


def _follower_stage(scenario, fset, prices, cfg, log, stage, price_round_payloads=None):
    """Run one follower best-response loop, logging a round per iteration.

    Returns (allocation, rounds, residual, converged).
    """
    F = PseudoGradient(scenario.surpluses, prices)
    state = {"prev_mu": None, "rounds": 0, "residual": float("nan")}
    n = scenario.n_users
    grid = scenario.grid

    def on_iteration(record, residual_done):
        rnd = log.total_rounds + 1
        if stage == 1:
            log.append(Message(rnd, PG, "announce", {
                "deficiency": grid.deficiency,
                "total_price": grid.total_price,
                "n_users": n,
            }))
        elif state["rounds"] == 0 and price_round_payloads:
            for i, price in price_round_payloads:
                log.append(Message(rnd, PG, "price_update", {"eu_id": i, "price": price}))
        for i in range(n):
            log.append(Message(rnd, f"eu:{i}", "offer", {"eu_id": i, "energy": float(record.x[i])}))
        for i in range(n):
            log.append(Message(rnd, f"eu:{i}", "slack_report", {"eu_id": i, "slack": float(record.mu[i])}))
        stop = residual_done or _interior_mu_stop(
            record.x, record.mu, state["prev_mu"], fset.upper_bounds
        )
        log.append(Message(rnd, PG, "repeat_bit", {"repeat": not stop}))
        state["prev_mu"] = record.mu
        state["rounds"] += 1
        state["residual"] = record.residual
        return stop

    x, trace = solve_ve(F, fset, cfg, on_iteration=on_iteration)
    converged = trace.stop_reason in ("residual", "caller")
    return x, state["rounds"], state["residual"], converged


def _stage_result(scenario, x, prices, rounds, residual) -> EquilibriumResult:
    surpluses = scenario.surpluses
    utilities = surpluses * x - 0.5 * x * x + prices * x
    return EquilibriumResult(
        energies=x,
        prices=prices,
        utilities=utilities,
        total_utility=float(utilities.sum()),
        grid_cost=grid_cost(prices, x, scenario.grid),
        follower_iterations=rounds,
        vi_residual=residual,
        mu_values=surpluses - x + prices,
    )


def run_stackelberg(scenario: Scenario, cfg: SolverConfig | None = None,
                    extra_price_rounds: int = 0) -> GameOutcome:
    """Play the two-stage game and return both stage equilibria with the
    full message transcript.

    Stage 1 announces the scenario and solves the followers' problem at the
    uniform price; stage 2 optimizes prices against the offered energies and
    re-solves. extra_price_rounds > 0 repeats the price-optimize/re-solve
    exchange that many additional times (exploratory mode, off by default).
    """
    problems = validate_scenario(scenario)
    if problems:
        raise ScenarioValidationError(problems)
    if cfg is None:
        cfg = SolverConfig()

    grid = scenario.grid
    n = scenario.n_users
    fset = FeasibleSet(scenario.surpluses, grid.deficiency)
    log = MessageLog()

    uniform = np.full(n, grid.total_price / n)
    x1, rounds1, res1, conv1 = _follower_stage(scenario, fset, uniform, cfg, log, stage=1)
    stage1 = _stage_result(scenario, x1, uniform, rounds1, res1)
    if not conv1:
        return GameOutcome(stage1=stage1, stage2=None, log=log, converged=False)

    offered = x1
    stage2 = None
    conv2 = True
    for _ in range(1 + max(extra_price_rounds, 0)):
        p_star = optimize_prices(offered, grid).prices
        payloads = [(i, float(p_star[i])) for i in range(n)]
        x2, rounds2, res2, conv2 = _follower_stage(
            scenario, fset, p_star, cfg, log, stage=2, price_round_payloads=payloads
        )
        stage2 = _stage_result(scenario, x2, p_star, rounds2, res2)
        offered = x2
        if not conv2:
            break
    return GameOutcome(stage1=stage1, stage2=stage2, log=log, converged=conv1 and conv2)


def check_nse(outcome: GameOutcome, scenario: Scenario, trials: int,
              seed: int = 0, tol: float = 1e-6) -> NSEReport:
    """Sample unilateral deviations on both sides of a converged outcome.

    Follower side: random single-seller energy deviations, others fixed at
    the stage-2 allocation, respecting the shared budget; the joint utility
    must never improve beyond tol. Leader side: random price vectors on the
    budget slice, costed against the energies the prices were optimized for
    (the stage-1 offers); the optimized prices must stay within tol of the
    best sample.
    """
    if not outcome.converged or outcome.stage2 is None:
        raise ValueError("check_nse requires a converged outcome")
    rng = np.random.default_rng([seed, scenario.seed])
    grid = scenario.grid
    surpluses = scenario.surpluses
    n = scenario.n_users

    x2 = outcome.stage2.energies
    p2 = outcome.stage2.prices
    budget_slack = grid.deficiency - float(x2.sum())

    idx = rng.integers(0, n, size=trials)
    caps = np.minimum(surpluses[idx], x2[idx] + max(budget_slack, 0.0))
    x_dev = rng.random(trials) * caps
    c = surpluses + p2
    gains = (c[idx] * x_dev - 0.5 * x_dev * x_dev) - (c[idx] * x2[idx] - 0.5 * x2[idx] * x2[idx])
    follower_viol = int((gains > tol).sum())
    max_follower = float(gains.max()) if trials else 0.0

    x_off = outcome.stage1.energies
    span = grid.total_price - n * grid.p_min
    prices = np.empty((0, n))
    while prices.shape[0] < trials:
        batch = rng.dirichlet(np.ones(n), size=trials) * span + grid.p_min
        ok = np.all(batch <= grid.p_max + 1e-12, axis=1)
        prices = np.vstack([prices, batch[ok]])
    prices = prices[:trials]
    base_cost = grid_cost(p2, x_off, grid)
    costs = (x_off * prices ** 2 + grid.cost_linear * prices + grid.cost_const).sum(axis=1)
    improvements = base_cost - costs
    leader_viol = int((improvements > tol).sum())
    max_leader = float(improvements.max()) if trials else 0.0

    return NSEReport(
        follower_trials=trials,
        follower_violations=follower_viol,
        max_follower_improvement=max_follower,
        leader_trials=trials,
        leader_violations=leader_viol,
        max_leader_improvement=max_leader,
        tolerance=tol,
    )


def run_fit(scenario: Scenario, tariff: float) -> EquilibriumResult:
    """Flat-tariff baseline: every seller offers its full surplus at the
    tariff and is curtailed proportionally when the total exceeds the
    grid's need. Utilities and grid cost use the same functionals as the
    game so the schemes are directly comparable.
    """
    if not tariff > 0.0:
        raise ValueError(f"tariff must be positive, got {tariff}")
    surpluses = scenario.surpluses
    total = surpluses.sum()
    scale = min(1.0, scenario.grid.deficiency / total)
    x = surpluses * scale
    prices = np.full(scenario.n_users, float(tariff))
    return _stage_result(scenario, x, prices, rounds=0, residual=0.0)
