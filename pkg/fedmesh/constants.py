"""Shared constants: scenario defaults, wire limits, retry policy, file names."""

MASK64 = (1 << 64) - 1

# Scenario defaults
DEFAULT_ROUNDS = 10
DEFAULT_LOCAL_EPOCHS = 1
DEFAULT_BATCH_SIZE = 32
DEFAULT_LEARNING_RATE = 0.01
DEFAULT_METRIC_INTERVAL_MS = 1000
DEFAULT_EDGE_PROBABILITY = 0.5
DEFAULT_TEST_FRACTION = 0.2
DEFAULT_MASTER_SEED = 0
DEFAULT_NEIGHBOR_TIMEOUT_S = 120.0
DEFAULT_CONNECT_TIMEOUT_S = 60.0

# Default hidden layer widths when a scenario omits its model
IMAGE_HIDDEN_DIMS = (128,)
SYNTHETIC_HIDDEN_DIMS = (32,)
IMAGE_INPUT_DIM = 28 * 28
IMAGE_CLASSES = 10

# Power meter calibration (watts)
DEFAULT_IDLE_WATTS = 2.6
DEFAULT_LOAD_COEFFICIENT_WATTS = 2.8
DEFAULT_NOISE_STDDEV_WATTS = 0.05
DEFAULT_SAMPLE_INTERVAL_MS = 1000
USB_BUS_VOLTAGE = 5.0

# Simulated resource pattern (percent)
TRAINING_CPU_MEAN = 40.0
TRAINING_CPU_STDDEV = 5.0
IDLE_CPU_MEAN = 8.0
IDLE_CPU_STDDEV = 2.0
RAM_MEAN = 33.0
RAM_STDDEV = 0.5

# Wire protocol
FRAME_CAP_BYTES = 16 * 1024 * 1024
LENGTH_FIELD_BYTES = 4
MSG_HELLO = 0x01
MSG_MODEL = 0x02
MSG_BYE = 0x03

# Telemetry posting retry policy
METRIC_RETRIES = 2
SUMMARY_RETRIES = 5
RETRY_DELAY_S = 0.25
HTTP_TIMEOUT_S = 5.0

# Config distribution / serving
DISTRIBUTION_ATTEMPTS = 3
DISTRIBUTION_RETRY_DELAY_S = 0.5
CONFIG_IDLE_TIMEOUT_S = 600.0
CONFIG_POLL_S = 0.25

# Controller
RUN_DEADLINE_S = 30 * 60
TOPOLOGY_MAX_ATTEMPTS = 1000
INTEGRITY_TOLERANCE = 1e-9

# |power_w - voltage_v * current_a| allowed on a PowerSample
POWER_TOLERANCE_W = 1e-6

# MNIST layout under data_dir
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# Output artifacts
RUN_RECORD_FILE = "run_record.json"
RUN_REPORT_STEM = "run_report"
POWER_LOG_TEMPLATE = "power_node{node_id}.csv"
SWEEP_REPORT_STEM = "sweep_comparison"

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUN_FAILURE = 2
EXIT_TIMEOUT = 3
