"""Safe augmented random search for emergency under-voltage load shedding."""

__version__ = "0.1.0"
