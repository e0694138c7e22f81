import numpy as np
import pytest

from fsct.heatmap import export_heatmap, read_csv, read_pgm, to_gray


class TestExport:
    def test_pgm_endpoints(self, tmp_path):
        path = export_heatmap([[0.0, 1.0], [1.0, 0.0]], tmp_path / "m.pgm", "pgm")
        assert path.read_text().splitlines()[:3] == ["P2", "2 2", "255"]
        np.testing.assert_array_equal(read_pgm(path), [[0, 255], [255, 0]])

    def test_constant_is_mid_gray(self, tmp_path):
        path = export_heatmap(np.full((3, 3), 0.42), tmp_path / "c.pgm", "pgm")
        np.testing.assert_array_equal(read_pgm(path), np.full((3, 3), 128))

    def test_row_major_shape(self, tmp_path):
        m = np.arange(6.0).reshape(2, 3)
        path = export_heatmap(m, tmp_path / "r.pgm", "pgm")
        assert path.read_text().splitlines()[1] == "3 2"
        np.testing.assert_array_equal(read_pgm(path), to_gray(m))

    def test_csv_round_trip(self, tmp_path, rng):
        m = rng.standard_normal((5, 4)) * 1e-3
        back = read_csv(export_heatmap(m, tmp_path / "m.csv"))
        np.testing.assert_allclose(back, m, rtol=0, atol=1e-15)
        assert np.array_equal(back, m)

    def test_rejects_non_finite_and_bad_format(self, tmp_path):
        with pytest.raises(ValueError):
            export_heatmap([[np.nan]], tmp_path / "x.csv")
        with pytest.raises(ValueError):
            export_heatmap([[1.0]], tmp_path / "x.png", "png")

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError, match="cannot write"):
            export_heatmap([[1.0]], tmp_path / "missing" / "x.csv")
