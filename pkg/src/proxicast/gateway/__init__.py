from .service import BatchRejected, IngestResult, RuleRejected, Service, ServiceConfig

__all__ = ["BatchRejected", "IngestResult", "RuleRejected", "Service", "ServiceConfig"]
