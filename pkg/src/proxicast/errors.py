"""Exception hierarchy shared by all proxicast modules.

Every error carries an ``http_status`` so the gateway can map it without a
lookup table per endpoint.
"""


class ProxicastError(Exception):
    http_status = 400


# -- wire capture ------------------------------------------------------------

class MalformedRecord(ProxicastError):
    pass


class InvalidMac(ProxicastError):
    pass


class InvalidTimestamp(ProxicastError):
    pass


class EmptySalt(ProxicastError):
    pass


class UnknownMonitor(ProxicastError):
    pass


# -- presence ----------------------------------------------------------------

class NoCurrentVisit(ProxicastError):
    http_status = 409


# -- registry ----------------------------------------------------------------

class UnknownTopic(ProxicastError):
    http_status = 404


class UnknownLocation(ProxicastError):
    pass


class UnknownMessage(ProxicastError):
    http_status = 404


class UnknownRule(ProxicastError):
    http_status = 404


class UnknownRegistration(ProxicastError):
    http_status = 404


class EmptyTopicSet(ProxicastError):
    pass


class PayloadTooLarge(ProxicastError):
    http_status = 413


class NotAuthorized(ProxicastError):
    http_status = 403


class Conflict(ProxicastError):
    http_status = 409


# -- dispatch ----------------------------------------------------------------

class MessageDeleted(ProxicastError):
    http_status = 409


class SubscriptionInactive(ProxicastError):
    http_status = 409
