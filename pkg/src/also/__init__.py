"""Online persona-strategy selection for conversational agents, framed as a bandit."""

__version__ = "0.1.0"
