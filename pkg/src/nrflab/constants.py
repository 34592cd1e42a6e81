from os import getenv
from pathlib import Path

# default dataset directory, overridable per-command with --data-dir
DATA_DIR = Path(getenv("NRFLAB_DATA_DIR", "data")).resolve()

# where ablation reports, feature caches and probe models go by default
OUTPUT_DIR = Path(getenv("NRFLAB_OUTPUT_DIR", "runs")).resolve()

LOG_LEVEL = getenv("NRFLAB_LOG_LEVEL", "INFO").upper()

# per-trial seed offset; keeps the per-column stream indices of different trials disjoint
TRIAL_SEED_STRIDE = 2**32
UINT64_MASK = 2**64 - 1

# inference-mode batch norm
BATCHNORM_EPSILON = 1e-5

# forward passes are chunked over the batch axis to bound im2col memory
FORWARD_CHUNK_SIZE = 256

# probe optimizer defaults
DEFAULT_L2_GRID = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0]
DEFAULT_MAX_ITERATIONS = 500
DEFAULT_GRADIENT_TOLERANCE = 1e-6
DEFAULT_HISTORY_SIZE = 10
DEFAULT_VALIDATION_FRACTION = 0.1

# binary formats
FEATURE_CACHE_MAGIC = b"NRF1"
FEATURE_CACHE_VERSION = 1
PROBE_MAGIC = b"PRB1"
CONFIG_SCHEMA_VERSION = 1

# report float formatting, 6 significant digits
REPORT_FLOAT_FORMAT = "%#.6g"
