import numpy as np
import pytest

TINY_FLOWS = """time,origin,dest,count,dist_mean,dist_median,dist_std,dur_mean,dur_median,dur_std
0,a,a,6,0.5,0.5,0.1,2,2,0.5
0,a,b,4,2.0,2.0,0.2,6,6,1
0,b,b,8,0.5,0.5,0.1,2,2,0.5
0,b,c,2,3.0,3.0,0.3,9,9,1
0,c,c,5,0.4,0.4,0.1,2,2,0.5
0,c,a,5,4.0,4.0,0.5,12,12,2
1,a,a,5,0.5,0.5,0.1,2,2,0.5
1,a,b,5,2.0,2.0,0.2,6,6,1
1,b,b,5,0.5,0.5,0.1,2,2,0.5
1,b,c,5,3.0,3.0,0.3,9,9,1
1,c,c,5,0.4,0.4,0.1,2,2,0.5
1,c,a,5,4.0,4.0,0.5,12,12,2
"""

TINY_CELLS = """cell_id,lat,lon
a,0.0,0.0
b,0.0,0.02
c,0.02,0.01
"""


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_files(tmp_path):
    flows = tmp_path / "flows.csv"
    cells = tmp_path / "cells.csv"
    flows.write_text(TINY_FLOWS)
    cells.write_text(TINY_CELLS)
    return flows, cells
