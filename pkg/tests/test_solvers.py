import math
import time

import numpy as np
import pytest

from mtscopf.formulation import (BINARY, EQ, GE, LE, FrozenModelData, LinExpr,
                                 Model)
from mtscopf.solvers import (SolveOptions, solve_lp, solve_milp, solve_nlp,
                             export_mps, parse_mps)
from mtscopf.solvers.aug_lag import SimpleNlp
from oracles import enumerate_binary_lp, tableau_simplex_max


def knapsack_model(binary=True):
    m = Model()
    kind = BINARY if binary else "continuous"
    x = m.add_variable("x", 0, 1, kind)
    y = m.add_variable("y", 0, 1, kind)
    m.add_constraint(LinExpr.from_terms([(x, 1), (y, 1)]), LE, 1.0)
    m.add_objective_term(x, 3)
    m.add_objective_term(y, 2)
    return m


class TestSolveLp:
    def test_knapsack_relaxation(self):
        res = solve_lp(knapsack_model(binary=False))
        assert res.status == "optimal"
        assert res.objective == pytest.approx(3.0, abs=1e-9)
        assert res.x[0] == pytest.approx(1.0, abs=1e-9)

    def test_infeasible(self):
        m = Model()
        x = m.add_variable("x", 0, 10)
        m.add_constraint(LinExpr.from_terms([(x, 1)]), LE, -1.0)
        m.add_objective_term(x, 1)
        assert solve_lp(m).status == "infeasible"

    def test_unbounded(self):
        m = Model()
        x = m.add_variable("x", 0, math.inf)
        m.add_objective_term(x, 1)
        assert solve_lp(m).status == "unbounded"

    def test_random_lps_against_tableau_oracle(self):
        """50 random dense LPs must match a textbook big-M tableau simplex."""
        rng = np.random.default_rng(17)
        checked = 0
        for trial in range(50):
            n = int(rng.integers(2, 7))
            mr = int(rng.integers(1, 6))
            A = rng.normal(size=(mr, n))
            ub = rng.uniform(0.5, 3.0, size=n)
            xf = rng.uniform(0, 1, size=n) * ub
            b = A @ xf + rng.uniform(-0.2, 1.0, size=mr)
            c = rng.normal(size=n)
            status_o, obj_o = tableau_simplex_max(c, A, b, ub)
            m = Model()
            xs = [m.add_variable(f"x{i}", 0, float(ub[i])) for i in range(n)]
            for i in range(mr):
                m.add_constraint(
                    LinExpr.from_terms([(xs[j], float(A[i, j])) for j in range(n)]),
                    LE, float(b[i]))
            for j in range(n):
                m.add_objective_term(xs[j], float(c[j]))
            res = solve_lp(m)
            assert res.status == status_o, trial
            if status_o == "optimal":
                assert res.objective == pytest.approx(obj_o, abs=1e-7), trial
                checked += 1
        assert checked >= 30

    def test_incumbent_satisfies_rows(self):
        """Returned solutions are rechecked independently of the solver."""
        rng = np.random.default_rng(23)
        for trial in range(20):
            n = int(rng.integers(2, 6))
            m = Model()
            xs = [m.add_variable(f"x{i}", float(lo), float(lo) + float(w))
                  for i, (lo, w) in enumerate(zip(rng.uniform(-2, 0, n),
                                                  rng.uniform(0.5, 2, n)))]
            for _ in range(int(rng.integers(1, 4))):
                sense = (LE, GE, EQ)[int(rng.integers(0, 3))]
                expr = LinExpr.from_terms(
                    [(x, float(rng.normal())) for x in xs])
                mid = sum(c * (x.lo + x.hi) / 2 for (xi, c), x in
                          zip(expr.coefs.items(), xs))
                m.add_constraint(expr, sense, float(mid))
            for x in xs:
                m.add_objective_term(x, float(rng.normal()))
            res = solve_lp(m)
            if res.status == "optimal":
                assert m.check_point(np.asarray(res.x), tol=1e-6) == []

    def test_determinism(self):
        m1 = knapsack_model(binary=False).freeze()
        a = solve_lp(m1, SolveOptions())
        b = solve_lp(m1, SolveOptions())
        assert a.objective == b.objective
        assert np.array_equal(a.x, b.x)


class TestSolveMilp:
    def test_knapsack(self):
        res = solve_milp(knapsack_model())
        assert res.status == "optimal"
        assert res.objective == pytest.approx(3.0, abs=1e-9)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(31)
        for trial in range(25):
            n_bin = int(rng.integers(1, 6))
            n_cont = int(rng.integers(0, 3))
            m = Model()
            xs = [m.add_variable(f"b{i}", 0, 1, BINARY) for i in range(n_bin)]
            xs += [m.add_variable(f"c{i}", 0, float(rng.uniform(0.5, 2)))
                   for i in range(n_cont)]
            for _ in range(int(rng.integers(1, 4))):
                expr = LinExpr.from_terms([(x, float(rng.normal())) for x in xs])
                m.add_constraint(expr, LE, float(rng.uniform(0.0, 2.0)))
            for x in xs:
                m.add_objective_term(x, float(rng.normal()))
            data = m.freeze()
            res = solve_milp(data, SolveOptions(time_limit=30, mip_gap=1e-6))
            oracle = enumerate_binary_lp(data, solve_lp)
            if oracle is None:
                assert res.status == "infeasible_reported"
            else:
                assert res.status == "optimal", trial
                assert res.objective == pytest.approx(oracle, abs=1e-6), trial

    def test_near_zero_time_limit_returns_warm_start(self):
        m = knapsack_model()
        data = m.freeze()
        warm = np.array([0.0, 0.0])
        res = solve_milp(data, SolveOptions(time_limit=0.001), warm_start=warm)
        assert res.status == "incumbent_time_limit"
        assert np.array_equal(res.x, warm)

    def test_dual_bound_dominates(self):
        rng = np.random.default_rng(37)
        for _ in range(10):
            m = Model()
            xs = [m.add_variable(f"b{i}", 0, 1, BINARY) for i in range(4)]
            expr = LinExpr.from_terms([(x, float(rng.uniform(0.2, 1))) for x in xs])
            m.add_constraint(expr, LE, 1.5)
            for x in xs:
                m.add_objective_term(x, float(rng.uniform(0, 2)))
            res = solve_milp(m, SolveOptions(time_limit=20))
            assert res.status == "optimal"
            assert res.bound >= res.objective - 1e-9

    def test_log_line_order(self):
        res = solve_milp(knapsack_model())
        assert res.log
        fields = [f.split("=")[0] for f in res.log[-1].split()]
        assert fields == ["iter", "obj", "bound", "gap", "nodes", "elapsed_s"]

    def test_determinism(self):
        rng = np.random.default_rng(41)
        m = Model()
        xs = [m.add_variable(f"b{i}", 0, 1, BINARY) for i in range(6)]
        expr = LinExpr.from_terms([(x, float(rng.uniform(0.2, 1))) for x in xs])
        m.add_constraint(expr, LE, 2.0)
        for x in xs:
            m.add_objective_term(x, float(rng.uniform(0, 2)))
        data = m.freeze()
        a = solve_milp(data, SolveOptions(worker_count=1))
        b = solve_milp(data, SolveOptions(worker_count=1))
        assert a.objective == b.objective
        assert np.array_equal(a.x, b.x)


class TestSolveNlp:
    def test_bound_projection(self):
        p = SimpleNlp(n=1, m=0, x_lo=np.array([3.0]), x_hi=np.array([10.0]),
                      objective_fn=lambda x: (x[0] - 2) ** 2,
                      gradient_fn=lambda x: np.array([2 * (x[0] - 2)]),
                      hess_struct=((0,), (0,)),
                      hessian_fn=lambda x, s, l: np.array([2.0 * s]),
                      x0=np.array([7.0]))
        res = solve_nlp(p)
        assert res.status == "converged"
        assert res.x[0] == pytest.approx(3.0, abs=1e-8)

    def test_two_bus_closed_form(self, twobus):
        from mtscopf.ac_stage import build_ac_stage
        stage = build_ac_stage(twobus, 0, {"G1": 1, "D1": 1})
        res = solve_nlp(stage, SolveOptions(time_limit=30, feas_tol=1e-9, opt_tol=1e-7))
        assert res.status == "converged"
        assert res.residual <= 1e-6
        theta2 = res.x[stage.col_theta(1)]
        assert theta2 == pytest.approx(-math.pi / 6, abs=1e-6)
        assert math.sin(-theta2) == pytest.approx(0.5, abs=1e-6)

    def test_equality_qp_against_kkt(self):
        rng = np.random.default_rng(43)
        for trial in range(6):
            n, mr = 6, 2
            M = rng.normal(size=(n, n))
            Q = M @ M.T + np.eye(n)
            c = rng.normal(size=n)
            A = rng.normal(size=(mr, n))
            b = rng.normal(size=mr)
            KKT = np.block([[Q, A.T], [A, np.zeros((mr, mr))]])
            x_star = np.linalg.solve(KKT, np.concatenate([-c, b]))[:n]
            rows, cols = np.tril_indices(n)
            jr = np.repeat(np.arange(mr), n)
            jc = np.tile(np.arange(n), mr)
            p = SimpleNlp(
                n=n, m=mr, x_lo=np.full(n, -np.inf), x_hi=np.full(n, np.inf),
                objective_fn=lambda x: 0.5 * x @ Q @ x + c @ x,
                gradient_fn=lambda x: Q @ x + c,
                constraints_fn=lambda x: A @ x - b,
                jac_struct=(jr, jc), jacobian_fn=lambda x: A.ravel(),
                hess_struct=(rows, cols),
                hessian_fn=lambda x, s, l: s * Q[rows, cols],
                x0=np.zeros(n))
            res = solve_nlp(p, SolveOptions(feas_tol=1e-9, opt_tol=1e-9))
            assert res.status == "converged"
            assert np.abs(res.x - x_star).max() <= 1e-6

    def test_time_limit_returns_best_iterate(self):
        calls = {"n": 0}

        def slow_obj(x):
            calls["n"] += 1
            time.sleep(0.002)
            return float(x @ x)

        p = SimpleNlp(n=4, m=0, x_lo=np.full(4, -5.0), x_hi=np.full(4, 5.0),
                      objective_fn=slow_obj,
                      gradient_fn=lambda x: 2 * x,
                      hess_struct=(tuple(range(4)), tuple(range(4))),
                      hessian_fn=lambda x, s, l: 2 * s * np.ones(4),
                      x0=np.full(4, 3.0))
        res = solve_nlp(p, SolveOptions(time_limit=0.02))
        assert res.status in ("converged", "time_limit")
        assert np.all(np.isfinite(res.x))


class TestMps:
    def test_knapsack_sections(self):
        text = export_mps(knapsack_model())
        assert "OBJSENSE MAX" in text
        for section in ("ROWS", "COLUMNS", "RHS", "RANGES", "BOUNDS", "ENDATA"):
            assert section in text
        # 1 constraint row + objective row
        rows_section = text.split("ROWS")[1].split("COLUMNS")[0]
        assert rows_section.count("\n L") + rows_section.count("\n G") \
            + rows_section.count("\n E") == 1
        bounds_section = text.split("BOUNDS")[1].split("ENDATA")[0]
        assert bounds_section.count("UP") == 2

    def test_round_trip_solve_agreement(self):
        rng = np.random.default_rng(47)
        for trial in range(20):
            n = int(rng.integers(2, 7))
            mr = int(rng.integers(1, 5))
            m = Model()
            xs = []
            for j in range(n):
                if rng.random() < 0.4:
                    xs.append(m.add_variable(f"a_really_long_name_{j}", 0, 1, BINARY))
                else:
                    xs.append(m.add_variable(f"a_really_long_name_{j}",
                                             float(rng.uniform(-2, 0)),
                                             float(rng.uniform(0.5, 3))))
            for i in range(mr):
                expr = LinExpr.from_terms(
                    [(xs[j], float(rng.normal())) for j in range(n)
                     if rng.random() < 0.85])
                m.add_constraint(expr, (LE, GE, EQ)[int(rng.integers(0, 3))],
                                 float(rng.normal() + 1.0))
            for x in xs:
                m.add_objective_term(x, float(rng.normal()))
            m.objective.add_constant(float(rng.normal()))
            direct = solve_milp(m, SolveOptions(time_limit=20))
            back = parse_mps(export_mps(m))
            again = solve_milp(back, SolveOptions(time_limit=20))
            assert direct.status == again.status, trial
            if direct.status == "optimal":
                assert direct.objective == pytest.approx(again.objective, abs=1e-6)

    def test_long_row_coordinates_unique(self):
        m = Model()
        xs = [m.add_variable(f"x{i}", 0, 1) for i in range(300)]
        m.add_constraint(LinExpr.from_terms([(x, 1.0 + i * 0.01)
                                             for i, x in enumerate(xs)]), LE, 10.0)
        for x in xs:
            m.add_objective_term(x, 1.0)
        back = parse_mps(export_mps(m))
        assert len(back.row_cols[0]) == 300
        assert len(set(back.row_cols[0].tolist())) == 300

    def test_name_collision_suffixing(self):
        m = Model()
        a = m.add_variable("same_long_name_a", 0, 1)
        b = m.add_variable("same_long_name_b", 0, 2)
        m.add_constraint(LinExpr.from_terms([(a, 1.0), (b, 1.0)]), LE, 2.0)
        m.add_objective_term(a, 1.0)
        m.add_objective_term(b, 2.0)
        back = parse_mps(export_mps(m))
        assert back.n == 2
        assert len(set(back.names)) == 2
        assert solve_lp(back).objective == pytest.approx(solve_lp(m).objective,
                                                         abs=1e-9)
