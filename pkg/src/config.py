"""Configuration and constants for the ccnf toolkit."""

# Artifact file names inside the output directory
DATA_FILE = "data.csv"
DATA_META_FILE = "data.meta.json"
MODEL_FILE = "model.json"
LOSS_TRACE_FILE = "loss_trace.csv"
CALIBRATION_FILE = "calibration.json"
REGION_FILE = "region.json"
REGION_POINTS_FILE = "region.csv"
COVERAGE_FILE = "coverage.json"
COVERAGE_CSV_FILE = "coverage.csv"
SAMPLES_FILE = "samples.csv"

# Default output directory
OUT_DIR_ENV = "CCNF_OUT_DIR"
DEFAULT_OUT_DIR = "ccnf-out"

# Document format versions
MODEL_FORMAT_VERSION = 1
RECORD_FORMAT_VERSION = 1
REGION_FORMAT_VERSION = 1
DATA_META_VERSION = 1
COVERAGE_FORMAT_VERSION = 1

# Model architecture
DEFAULT_COUPLING_LAYERS = 6
DEFAULT_HIDDEN_SIZE = 32
DEFAULT_NET_WIDTH = 64
DEFAULT_NET_DEPTH = 2
DEFAULT_S_CLAMP = 3.0

# Training
DEFAULT_EPOCHS = 200
DEFAULT_BATCH_SIZE = 64
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_FINAL_LR_FRACTION = 1.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_LOG_EVERY = 10
DEFAULT_SEED = 0

# Conformal
DEFAULT_EPSILONS = (0.1, 0.2)

# Regions
MAX_GRID_DIM = 3
DEFAULT_GRID_CELLS = 200
GRID_MARGIN_STD = 3.0
DEFAULT_MC_SAMPLES = 10_000
CLUSTER_RADIUS_FACTOR = 1.0
BOX_MEDIAN_SAMPLES = 1000
DEFAULT_VOLUME_SERIES = 20
DENSITY_CHUNK_ROWS = 8192

# Data generators
PARTICLE_RHO = 0.995
PARTICLE_OMEGA_RANGE = (0.1, 0.5)
BIMODAL_MODE_OFFSET = 0.3
BIMODAL_MODE_STD = 0.05
BIMODAL_CONTEXT_SIGMA = 0.05

# Sampling command
DEFAULT_FORECAST_SAMPLES = 100

# CSV schema
SERIES_ID_COLUMN = "series_id"
TIME_COLUMN = "t"
VALUE_PREFIX = "v"
