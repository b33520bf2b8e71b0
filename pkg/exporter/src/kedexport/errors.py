class ExportError(Exception):
    """Raised when a job cannot produce a valid export (bad dataset layout,
    class mismatch against the dataset manifest, unknown model id)."""
