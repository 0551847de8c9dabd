"""PNM telemetry fault diagnosis: maintenance vs service issues."""

__version__ = "0.1.0"
