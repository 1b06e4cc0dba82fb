"""wmlab: frequency-domain image watermark embedding, detection, removal
attacks, and a reproducible benchmark harness."""

__version__ = "0.1.0"

KEY_FORMAT_VERSION = 1
MODEL_FORMAT_VERSION = 1
REPORT_SCHEMA_VERSION = 1
