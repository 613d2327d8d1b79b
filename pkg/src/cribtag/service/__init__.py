from .app import ModelBundle, create_app, record_digest

__all__ = ["ModelBundle", "create_app", "record_digest"]
