"""Transparent distributed MQTT: a master broker that discovers edge
brokers, maps their topics, and redirects clients to whichever broker
currently hosts the topic they want."""

__version__ = "0.1.0"

from .packets import BrokerRef, Reason

__all__ = ["BrokerRef", "Reason", "__version__"]
