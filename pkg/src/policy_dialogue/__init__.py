"""Policy-parameterised prompting for multi-agent LLM discussions."""

__version__ = "0.1.0"
