from fbflow.utils.helpers import as_vector, format_row, sanitize_filename

__all__ = ["as_vector", "format_row", "sanitize_filename"]
