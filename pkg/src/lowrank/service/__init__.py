from .app import create_app
from .jobs import JobRegistry

__all__ = ["create_app", "JobRegistry"]
