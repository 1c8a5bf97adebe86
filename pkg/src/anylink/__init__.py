"""Entity linking to knowledge bases whose schema was never seen in training.

Entities are flattened to text with attribute-aware separators, retrieved with
a bi-encoder and reranked with a cross-encoder.
"""

__version__ = "0.1.0"

from .errors import AnylinkError, ConfigError, DataError, TrainingDivergence
from .kb import AttributeValue, CandidateList, Entity, KnowledgeBase, Mention
from .serialization import Mode, SeparatorRegistry, SerializationConfig, build_registry, serialize_entity

__all__ = [
    "AnylinkError", "ConfigError", "DataError", "TrainingDivergence",
    "AttributeValue", "CandidateList", "Entity", "KnowledgeBase", "Mention",
    "Mode", "SeparatorRegistry", "SerializationConfig", "build_registry", "serialize_entity",
]
