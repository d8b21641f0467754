import numpy as np
import pytest

from gridflex.config import bundled_case_path
from gridflex.dispatch import (
    DispatchError,
    DispatchInput,
    check_soc_exactness,
    dlmp_sensitivity_check,
    power_balance_residuals,
    solve_dispatch,
)
from gridflex.grid import Generator, Line, load_network

from nets import make_net, random_radial_net, two_bus_quadratic


def dispatch_input(net, load_p=None, load_q=None, res_cap=None, price=80.0,
                   grid_cap=5.0, hour=0):
    n = net.n_bus
    n_res = len([g for g in net.generators if g.kind == "renewable"])
    return DispatchInput(
        net=net,
        nodal_load_p=np.zeros(n) if load_p is None else np.asarray(load_p, float),
        nodal_load_q=np.zeros(n) if load_q is None else np.asarray(load_q, float),
        res_cap=np.zeros(n_res) if res_cap is None else np.asarray(res_cap, float),
        wholesale_price=price,
        grid_cap=grid_cap,
        hour=hour,
    )


def case33_input(scale=1.0, price=80.0, res=(1.0, 1.0)):
    net = load_network(bundled_case_path("case33"))
    return net, dispatch_input(
        net,
        load_p=scale * np.asarray(net.base_load_p),
        load_q=scale * np.asarray(net.base_load_q),
        res_cap=np.asarray(res),
        price=price,
    )


class TestSolveDispatch:
    def test_two_bus_hand_kkt(self):
        # One quadratic generator (a=1, b=10), 1 MW load over a lossless line:
        # p* = 1, objective = 1 + 10 = 11, dlmp = 2*a*p + b = 12 $/MWh.
        net = two_bus_quadratic()
        inp = dispatch_input(net, load_p=[0.0, 1.0])
        sol = solve_dispatch(inp)
        assert sol.optimal
        assert sol.p_gen[0] == pytest.approx(1.0, abs=1e-6)
        assert sol.objective == pytest.approx(11.0, abs=1e-5)
        assert sol.dlmp[1] == pytest.approx(12.0, abs=1e-4)
        assert sol.dlmp[0] == pytest.approx(12.0, abs=1e-4)

    def test_zero_load_zero_cost(self):
        net = two_bus_quadratic(c=0.0)
        sol = solve_dispatch(dispatch_input(net))
        assert sol.optimal
        assert abs(sol.objective) < 1e-6
        assert np.all(np.abs(sol.p_gen) < 1e-7)

    def test_supply_bound_infeasible(self):
        net = two_bus_quadratic(p_max=2.0)
        sol = solve_dispatch(dispatch_input(net, load_p=[0.0, 50.0]))
        assert sol.status == "infeasible"

    def test_constant_cost_enters_objective(self):
        net = two_bus_quadratic(c=50.0)
        sol = solve_dispatch(dispatch_input(net))
        assert sol.objective == pytest.approx(50.0, abs=1e-6)

    def test_case33_solves_fast_and_balanced(self):
        net, inp = case33_input()
        sol = solve_dispatch(inp)
        assert sol.optimal
        res = power_balance_residuals(net, inp, sol)
        assert np.max(np.abs(res)) <= 1e-7
        assert np.all(sol.v_sq >= 0.93**2 - 1e-7)
        assert np.all(sol.v_sq <= 1.05**2 + 1e-7)
        assert np.all(sol.dlmp > 0)

    def test_case33_box_constraints_respected(self):
        net, inp = case33_input(scale=1.0, price=70.0)
        sol = solve_dispatch(inp)
        for gi, g in enumerate(net.generators):
            cap = {gen_i: c for gen_i, c in zip(
                [i for i, gg in enumerate(net.generators) if gg.kind == "renewable"],
                inp.res_cap)}.get(gi, g.p_max if g.kind != "grid" else inp.grid_cap)
            assert sol.p_gen[gi] >= g.p_min - 1e-7
            assert sol.p_gen[gi] <= cap + 1e-7

    def test_objective_monotone_in_load(self):
        net, inp = case33_input(scale=0.7)
        lo = solve_dispatch(inp).objective
        _, inp2 = case33_input(scale=1.4)
        hi = solve_dispatch(inp2).objective
        assert hi >= lo

    def test_dlmp_at_slack_equals_price_when_interior(self):
        # Import strictly interior and nothing else binding at the slack:
        # marginal energy comes from the grid at the wholesale price.
        net, inp = case33_input(scale=1.0, price=95.0, res=(0.2, 0.2))
        sol = solve_dispatch(inp)
        assert sol.optimal
        assert 1e-3 < sol.p_grid < inp.grid_cap - 1e-3
        assert sol.dlmp[0] == pytest.approx(95.0, rel=1e-4)

    def test_determinism(self):
        _, inp = case33_input()
        a = solve_dispatch(inp)
        b = solve_dispatch(inp)
        assert np.array_equal(a.p_gen, b.p_gen)
        assert np.array_equal(a.dlmp, b.dlmp)

    def test_input_validation(self):
        net = two_bus_quadratic()
        with pytest.raises(DispatchError, match="nonnegative"):
            solve_dispatch(dispatch_input(net, load_p=[0.0, -1.0]))
        bad = dispatch_input(net)
        object.__setattr__(bad, "nodal_load_p", np.zeros(5))
        with pytest.raises(DispatchError, match="per bus"):
            solve_dispatch(bad)


class TestSocExactness:
    def test_case33_operating_point_exact(self):
        net, inp = case33_input()
        sol = solve_dispatch(inp)
        report = check_soc_exactness(net, sol, tol=1e-6)
        assert report.exact
        assert np.max(report.gaps) <= 1e-6

    def test_lossless_two_bus_gap_zero(self):
        net = two_bus_quadratic(r=0.0, x=0.0)
        sol = solve_dispatch(dispatch_input(net, load_p=[0.0, 1.0]))
        report = check_soc_exactness(net, sol, tol=1e-6)
        assert report.exact
        assert np.max(np.abs(report.gaps)) <= 1e-8

    def test_negative_price_injection_flagged_not_hidden(self):
        # Negative-cost renewable with nowhere to send power: the relaxation
        # inflates the current to burn it in fictitious losses.
        net = make_net(
            2,
            [Line(0, 1, 0.1, 0.0, 400.0)],
            [Generator(bus=1, kind="renewable", p_min=0.0, p_max=2.0,
                       cost_k=-50.0, carbon_intensity=0.1)],
        )
        sol = solve_dispatch(dispatch_input(net, res_cap=[2.0]))
        assert sol.optimal
        report = check_soc_exactness(net, sol, tol=1e-6)
        assert len(report.flagged) == 1

    def test_requires_optimal_solution(self):
        net = two_bus_quadratic(p_max=1.0)
        sol = solve_dispatch(dispatch_input(net, load_p=[0.0, 10.0]))
        with pytest.raises(DispatchError):
            check_soc_exactness(net, sol)


class TestDlmpSensitivity:
    def test_two_bus_hand_case(self):
        net = two_bus_quadratic()
        res = dlmp_sensitivity_check(dispatch_input(net, load_p=[0.0, 1.0]), bus=1)
        assert res.dual == pytest.approx(12.0, abs=1e-3)
        assert res.finite_difference == pytest.approx(12.0, abs=1e-2)
        assert not res.degenerate

    def test_linear_cost_marginal_is_b(self):
        net = two_bus_quadratic(a=0.0, b=42.0)
        sol = solve_dispatch(dispatch_input(net, load_p=[0.0, 1.0]))
        assert sol.dlmp[1] == pytest.approx(42.0, abs=1e-4)

    def test_random_five_bus_cases(self):
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            net = random_radial_net(rng, 5)
            load = rng.uniform(0.05, 0.6, size=5)
            load[0] = 0.0
            inp = dispatch_input(net, load_p=load, load_q=0.4 * load,
                                 price=float(rng.uniform(40.0, 120.0)))
            res = dlmp_sensitivity_check(inp, bus=int(rng.integers(1, 5)))
            if not res.degenerate:
                assert abs(res.dual - res.finite_difference) <= 1e-2 * max(abs(res.dual), 1e-6)
                hits += 1
        assert hits >= 18  # degenerate points are rare on these instances


class TestConcurrency:
    def test_concurrent_solves_match_sequential(self):
        # Stateless contract: distinct inputs solved in parallel equal the
        # sequential results bit for bit.
        from concurrent.futures import ThreadPoolExecutor

        net, _ = case33_input()
        inputs = []
        rng = np.random.default_rng(9)
        for _ in range(8):
            scale = rng.uniform(0.4, 0.9)
            inputs.append(dispatch_input(
                net, load_p=scale * np.asarray(net.base_load_p),
                load_q=scale * 0.33 * np.asarray(net.base_load_p),
                res_cap=rng.uniform(0, 1.5, 2),
                price=float(rng.uniform(50, 140))))
        sequential = [solve_dispatch(i) for i in inputs]
        with ThreadPoolExecutor(max_workers=4) as pool:
            parallel = list(pool.map(solve_dispatch, inputs))
        for a, b in zip(sequential, parallel):
            assert np.array_equal(a.p_gen, b.p_gen)
            assert np.array_equal(a.dlmp, b.dlmp)
