"""Reference external refiner speaking the wmlab subprocess protocol."""

__version__ = "0.1.0"
