import os

# Root directory
ROOT_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# Top-level directories
LOGS_DIR = os.environ.get("EMTOOLKIT_LOGS_DIR", os.path.join(ROOT_DIR, "logs"))
RESULTS_DIR = os.path.join(ROOT_DIR, "results")     # Default --out for the CLI

# Config files
ENV_PATH = os.path.join(ROOT_DIR, ".env")
SOLVER_CONFIG_FPATH = os.path.join(ROOT_DIR, "src", "config", "solver_config.yaml")
