"""Registry, discovery and token service for xApp-style microservices."""

from .model import Scope, Status, TokenClaims, XAppProfile, new_profile, scope_allowed, select_provider

__version__ = "0.1.0"

__all__ = ["Scope", "Status", "TokenClaims", "XAppProfile", "new_profile", "scope_allowed", "select_provider"]
