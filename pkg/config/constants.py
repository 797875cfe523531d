# bottlenet/config/constants.py

# --- Codec Configuration ---
DEFAULT_BITS = 8
DEFAULT_QUALITY = 20
BLOCK_SIZE = 8
QUALITY_LADDER = (100, 80, 60, 40, 20, 10, 5, 1)

# --- Training and Sweep Configuration ---
DEFAULT_EPOCHS = 8
DEFAULT_LEARNING_RATE = 0.05
DEFAULT_BATCH_SIZE = 32
DEFAULT_SEED = 7
HOLDOUT_FRACTION = 0.15
DEFAULT_EPSILON = 0.02
DEFAULT_S_MAX = 2
DEFAULT_C_MAX = 8
CALIBRATION_SAMPLES = 32
BATCHNORM_MOMENTUM = 0.9
BATCHNORM_EPS = 1e-5

# --- Runtime Configuration ---
DEFAULT_HOST = '127.0.0.1'
DEFAULT_PORT = 9707
DEFAULT_TIMEOUT_MS = 5000
DEFAULT_PERIOD_MS = 1000
MAX_FRAME_BODY = 64 * 1024 * 1024
SERVER_CAPACITY = 4
MAX_MISSED_PINGS = 3
DEFAULT_HYSTERESIS = 0.5
DEFAULT_MODELS_DIR = 'runs/sweep'  # sweep output, read by serve, infer and monitor

# --- Bundled Data ---
REFERENCE_PROFILE_FILE = 'reference_profile.json'
DESK_GRAPH_FILE = 'desk_graph.json'
