"""
Configuration file for the cross-lingual query-by-example pipeline
"""
import os
from dotenv import load_dotenv

load_dotenv()

# Environment
DEFAULT_DATA_DIR = "data"
OUTPUT_DIR = os.getenv("QBE_OUTPUT_DIR", "runs")
LOG_LEVEL = os.getenv("QBE_LOG_LEVEL", "INFO")
DEFAULT_SEED = int(os.getenv("QBE_SEED", "42"))
DEFAULT_WORKERS = int(os.getenv("QBE_WORKERS", "1"))


def data_dir() -> str:
    """QBE_DATA_DIR as the environment holds it now"""
    return os.getenv("QBE_DATA_DIR", DEFAULT_DATA_DIR)


# BM25 pre-selection
BM25_K1 = 1.2
BM25_B = 0.75
PRESELECT_THRESHOLDS = [1000, 5000, 10000]
DEFAULT_THRESHOLD = 1000

# Fusion
RRF_K = 10.0  # the literature default is 60

# Truncation
QUERY_MAX_LEN = 150
DOC_MAX_LEN = 400

# ListNet training
LIST_SIZE = 50
EPOCHS = 21
CHECKPOINT_EVERY = 3
LEARNING_RATE = 1e-4
LISTS_PER_EXAMPLE = 8
VALIDATION_FRACTION = 0.1
INIT_SCALE = 0.1

# Adam
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Rankers
CONVKNRM_FILTERS = 128
CONVKNRM_ORDERS = (1, 2)
MATCHPYRAMID_CANVAS = (150, 400)
MATCHPYRAMID_CHANNELS = 16
MATCHPYRAMID_LAYERS = 3
MATCHPYRAMID_POOLED_GRID = (4, 10)
LOG_CLAMP = 1e-10

# Evaluation
METRIC_DEPTH = 10
