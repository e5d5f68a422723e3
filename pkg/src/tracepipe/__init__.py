"""tracepipe: adapter pipeline from enterprise data sources to a simulated
permissioned traceability ledger.

Ingestion (push endpoints, file uploads, polling) feeds per-tenant durable
topics; a transform stage maps raw records to canonical traceability events;
a loader commits them idempotently to a hash-chained ledger with per-tenant
channels; a status store tracks each request through its lifecycle.
"""

__version__ = "0.1.0"
