import os
import tempfile

# Loggers open their files at import time; keep test logs out of the repository
os.environ.setdefault("EMTOOLKIT_LOGS_DIR", tempfile.mkdtemp(prefix="em-toolkit-logs-"))

import numpy as np
import pytest

from data_processing.genotypes import parse_genotypes
from data_processing.newick import parse_tree


FIG4_GENOTYPES = (
    "ind1\tA/A\tC/C\tA/G\tC/C\n"
    "ind2\tA/T\tC/G\tA/A\tC/C\n"
    "ind3\tA/A\tC/C\tG/G\tC/T\n"
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fig4_table():
    return parse_genotypes(FIG4_GENOTYPES)


@pytest.fixture
def four_leaf_tree():
    return parse_tree("((a:0.1,b:0.2):0.05,(c:0.15,d:0.1):0.05);")
