import numpy as np

from fraccontrol.analysis import ConvergenceRecord, StudyResult
from fraccontrol.config import StudyConfig
from fraccontrol.mesh import Disc, Interval, build_mesh
from fraccontrol.optimize import OptimizeReport
from fraccontrol.report import plot_convergence, plot_history, plot_space_time, rate_table, write_plot_data
from fraccontrol.timestepping import TimeGrid


def _result():
    cfg = StudyConfig(mode="convergence", problem="manufactured-1d", s_values=[0.5])
    recs = [ConvergenceRecord(s=0.5, level=i, h=h, tau=h, n_dofs=int(2 / h) - 1,
                              err_state_l2q=h, err_control_l2q=h**0.5, err_state_energy=float("nan"))
            for i, h in enumerate((0.5, 0.25, 0.125))]
    return StudyResult(cfg, recs)


def test_plot_data_and_table(tmp_path):
    res = _result()
    paths = write_plot_data(res, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["err_control_l2q_s0.5.dat", "err_state_l2q_s0.5.dat"]
    rows = (tmp_path / "err_state_l2q_s0.5.dat").read_text().split()
    assert [float(v) for v in rows[:2]] == [0.5, 0.5]
    table = rate_table(res)
    assert "1.000, 1.000" in table and "0.500, 0.500" in table


def test_figures_are_png(tmp_path):
    res = _result()
    p = plot_convergence(res, tmp_path / "c.png")
    assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    for dom, h in ((Interval(), 0.5), (Disc(), 0.5)):
        m = build_mesh(dom, h)
        g = TimeGrid(1.0, 3)
        q = plot_space_time(np.ones((4, m.n_dofs)), m, g, tmp_path / f"n{m.dim}.png", "u")
        assert q.stat().st_size > 0
        q = plot_space_time(np.ones((3, m.n_cells)), m, g, tmp_path / f"c{m.dim}.png", "z", kind="cell")
        assert q.stat().st_size > 0
    rep = OptimizeReport(2, 0.1, 1e-9, True, [1.0, 0.5, 0.1],
                         [(0, 1.0, 1.0, 0.0), (1, 0.5, 1e-3, 0.2), (2, 0.1, 1e-9, 0.1)])
    assert plot_history(rep, tmp_path / "h.png").stat().st_size > 0
