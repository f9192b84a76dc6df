"""bridgekit: an HTTP bridge, risk gate, and evaluation kit for MCP tool servers.

Kept import-light on purpose; submodules pull in their own dependencies.
"""

__version__ = "0.1.0"
