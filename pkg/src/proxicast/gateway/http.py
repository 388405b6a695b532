"""JSON-over-HTTP API.

Errors come back as ``{"error": <kind>, "detail": <text>}`` with status 400
(validation), 403 (not the topic admin), 404 (unknown id), 409 (conflict) or
413 (payload too large). Validation errors never echo request values, so a raw
MAC sent in a bad request cannot leak back out.
"""

from __future__ import annotations

import base64
from datetime import date, datetime, timedelta
from typing import Any, Optional

from fastapi import Body, FastAPI, Header, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from ..clock import format_ts, parse_ts
from ..dispatch import DeliveryPolicy
from ..errors import ProxicastError
from ..registry import Message, SubscriptionRecord
from ..ruledsl import RuleAst, pretty_print
from .service import BatchRejected, RuleRejected, Service, message_payload


class TopicIn(BaseModel):
    topic_id: str
    location_id: str
    title: str = ""
    admin_id: str


class TopicUpdate(BaseModel):
    location_id: str
    title: str = ""
    admin_id: str


class MonitorIn(BaseModel):
    location_id: str


class MessageIn(BaseModel):
    message_id: Optional[str] = None
    payload: Optional[str] = None
    payload_b64: Optional[str] = None
    policy_id: Optional[str] = None


class RuleIn(BaseModel):
    text: str
    rule_id: Optional[str] = None


class SubscriptionIn(BaseModel):
    registration_id: str
    topic_ids: list[str]
    device: Optional[str] = None
    mac: Optional[str] = None


class ActiveIn(BaseModel):
    active: bool


class OnlineIn(BaseModel):
    online: bool = True


class TickIn(BaseModel):
    now: Optional[str] = None


class PolicyIn(BaseModel):
    repeat_count: int = Field(1, ge=1)
    repeat_interval_s: Optional[float] = None
    window: Optional[list[str]] = None
    stop_on_delivery: bool = False
    drop_if_missed: bool = False


def _message_out(m: Message) -> dict:
    d = {
        "message_id": m.message_id,
        "topic_id": m.topic_id,
        "created_ts": format_ts(m.created_ts),
        "delivery_policy_id": m.delivery_policy_id,
    }
    try:
        d["payload"] = m.payload.decode("utf-8")
    except UnicodeDecodeError:
        d["payload_b64"] = base64.b64encode(m.payload).decode("ascii")
    return d


def _sub_out(s: SubscriptionRecord) -> dict:
    return s.to_dict()


def _rule_out(r: RuleAst) -> dict:
    return {"rule_id": r.rule_id, "topic_id": r.topic_id, "text": pretty_print(r)}


def _ts_param(value: str, name: str) -> datetime:
    try:
        return parse_ts(value)
    except ValueError:
        raise ProxicastError(f"{name} must be an RFC3339 timestamp") from None


def create_app(service: Service) -> FastAPI:
    app = FastAPI(title="proxicast", version="0.1.0")
    app.state.service = service

    @app.exception_handler(ProxicastError)
    async def _domain_error(request: Request, exc: ProxicastError):
        body: dict[str, Any] = {"error": type(exc).__name__, "detail": str(exc)}
        if isinstance(exc, BatchRejected):
            body["errors"] = exc.errors
        if isinstance(exc, RuleRejected):
            body["diagnostics"] = [d.to_dict() for d in exc.diagnostics]
        return JSONResponse(body, status_code=exc.http_status)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        problems = [
            {"loc": [str(p) for p in e.get("loc", ())], "msg": e.get("msg", "")}
            for e in exc.errors()
        ]
        return JSONResponse(
            {"error": "ValidationError", "detail": "invalid request", "problems": problems},
            status_code=400,
        )

    # -- monitors --------------------------------------------------------------

    @app.put("/v1/monitors/{monitor_id}")
    def put_monitor(monitor_id: str, body: MonitorIn):
        service.register_monitor(monitor_id, body.location_id)
        return {"monitor_id": monitor_id, "location_id": body.location_id}

    @app.get("/v1/monitors")
    def list_monitors():
        return dict(sorted(service.registry.monitors.items()))

    # -- topics ----------------------------------------------------------------

    @app.post("/v1/topics", status_code=201)
    def create_topic(body: TopicIn):
        return service.create_topic(body.topic_id, body.location_id, body.title, body.admin_id).to_dict()

    @app.get("/v1/topics")
    def list_topics():
        return [t.to_dict() for t in service.registry.topics()]

    @app.get("/v1/topics/{topic_id}")
    def get_topic(topic_id: str):
        return service.registry.get_topic(topic_id).to_dict()

    @app.put("/v1/topics/{topic_id}")
    def put_topic(topic_id: str, body: TopicUpdate):
        return service.put_topic(topic_id, body.location_id, body.title, body.admin_id).to_dict()

    @app.delete("/v1/topics/{topic_id}", status_code=204)
    def delete_topic(topic_id: str, x_admin_id: str = Header("")):
        service.delete_topic(topic_id, x_admin_id)
        return Response(status_code=204)

    # -- messages --------------------------------------------------------------

    @app.post("/v1/topics/{topic_id}/messages", status_code=201)
    def post_message(topic_id: str, body: MessageIn, x_admin_id: str = Header("")):
        payload = message_payload(body.model_dump(exclude_none=True))
        msg = service.put_message(topic_id, payload, x_admin_id, body.message_id, body.policy_id)
        return _message_out(msg)

    @app.get("/v1/topics/{topic_id}/messages")
    def list_messages(topic_id: str):
        return [_message_out(m) for m in service.registry.list_messages(topic_id)]

    @app.get("/v1/topics/{topic_id}/messages/{message_id}")
    def get_message(topic_id: str, message_id: str):
        return _message_out(service._message_in_topic(topic_id, message_id))

    @app.put("/v1/topics/{topic_id}/messages/{message_id}")
    def put_message(topic_id: str, message_id: str, body: MessageIn, x_admin_id: str = Header("")):
        payload = message_payload(body.model_dump(exclude_none=True))
        if service.registry.find_message(message_id) is None:
            msg = service.put_message(topic_id, payload, x_admin_id, message_id, body.policy_id)
        else:
            msg = service.edit_message(topic_id, message_id, payload, x_admin_id, body.policy_id)
        return _message_out(msg)

    @app.delete("/v1/topics/{topic_id}/messages/{message_id}", status_code=204)
    def delete_message(topic_id: str, message_id: str, x_admin_id: str = Header("")):
        service.delete_message(topic_id, message_id, x_admin_id)
        return Response(status_code=204)

    # -- rules -----------------------------------------------------------------

    @app.post("/v1/topics/{topic_id}/rules", status_code=201)
    def post_rule(topic_id: str, body: RuleIn, x_admin_id: str = Header("")):
        return _rule_out(service.add_rule(topic_id, body.text, x_admin_id, body.rule_id))

    @app.get("/v1/topics/{topic_id}/rules")
    def list_rules(topic_id: str):
        return [_rule_out(r) for r in service.list_rules(topic_id)]

    @app.put("/v1/topics/{topic_id}/rules/{rule_id}")
    def put_rule(topic_id: str, rule_id: str, body: RuleIn, x_admin_id: str = Header("")):
        return _rule_out(service.put_rule(topic_id, rule_id, body.text, x_admin_id))

    @app.delete("/v1/topics/{topic_id}/rules/{rule_id}", status_code=204)
    def delete_rule(topic_id: str, rule_id: str, x_admin_id: str = Header("")):
        service.delete_rule(topic_id, rule_id, x_admin_id)
        return Response(status_code=204)

    # -- delivery policies -----------------------------------------------------

    @app.put("/v1/policies/{policy_id}")
    def put_policy(policy_id: str, body: PolicyIn):
        try:
            policy = DeliveryPolicy.from_dict(body.model_dump())
        except ValueError as exc:
            raise ProxicastError(str(exc)) from None
        service.put_policy(policy_id, policy)
        return {"policy_id": policy_id, **policy.to_dict()}

    @app.get("/v1/policies/{policy_id}")
    def get_policy(policy_id: str):
        policy = service.dispatcher.policies.get(policy_id)
        if policy is None:
            return JSONResponse({"error": "UnknownPolicy", "detail": policy_id}, status_code=404)
        return {"policy_id": policy_id, **policy.to_dict()}

    # -- subscriptions ---------------------------------------------------------

    @app.post("/v1/subscriptions", status_code=201)
    def post_subscription(body: SubscriptionIn):
        rec = service.subscribe(
            body.registration_id, body.topic_ids, device=body.device, mac=body.mac
        )
        return _sub_out(rec)

    @app.get("/v1/subscriptions/{registration_id}")
    def get_subscription(registration_id: str):
        return _sub_out(service.registry.get_subscription(registration_id))

    @app.delete("/v1/subscriptions/{registration_id}")
    def delete_subscription(registration_id: str):
        service.unsubscribe(registration_id)
        return {"registration_id": registration_id, "unsubscribed": True}

    @app.patch("/v1/subscriptions/{registration_id}")
    def patch_subscription(registration_id: str, body: ActiveIn):
        return _sub_out(service.set_active(registration_id, body.active))

    # -- detections ------------------------------------------------------------

    @app.post("/v1/detections")
    def post_detections(body: Any = Body(...)):
        records = body.get("records") if isinstance(body, dict) else body
        if not isinstance(records, list):
            raise ProxicastError("body must be a list of records or {\"records\": [...]}")
        return service.ingest_records(records).to_dict()

    # -- reports ---------------------------------------------------------------

    @app.get("/v1/reports/hits")
    def report_hits(
        location: str,
        start: str,
        end: str,
        bucket_minutes: int = Query(60, gt=0),
    ):
        buckets = service.hits(
            location,
            timedelta(minutes=bucket_minutes),
            _ts_param(start, "start"),
            _ts_param(end, "end"),
        )
        return [b.to_dict() for b in buckets]

    @app.get("/v1/reports/split")
    def report_split(
        location: str,
        end_day: date,
        window_days: int = Query(7, ge=1),
        min_days: int = Query(5, ge=1),
    ):
        try:
            return service.split(location, window_days, min_days, end_day).to_dict()
        except ValueError as exc:
            raise ProxicastError(str(exc)) from None

    @app.get("/v1/reports/dwell")
    def report_dwell(
        location: str,
        start: Optional[str] = None,
        end: Optional[str] = None,
        granularity_minutes: int = Query(5, gt=0),
    ):
        return service.dwell(
            location,
            _ts_param(start, "start") if start else None,
            _ts_param(end, "end") if end else None,
            timedelta(minutes=granularity_minutes),
        ).to_dict()

    @app.get("/v1/reports/routes")
    def report_routes(
        max_gap_seconds: float = Query(600, gt=0),
        distance: list[str] = Query(default=[]),
    ):
        distances = {}
        for item in distance:
            try:
                a, b, meters = item.split(":")
                distances[(a, b)] = float(meters)
            except ValueError:
                raise ProxicastError("distance must look like from:to:meters") from None
        return service.routes(timedelta(seconds=max_gap_seconds), distances).to_dict()

    # -- mock backend test controls ---------------------------------------------

    @app.post("/v1/testing/endpoints/{registration_id}/online")
    def set_online(registration_id: str, body: OnlineIn = Body(OnlineIn())):
        return {"registration_id": registration_id, "drained": service.set_online(registration_id, body.online)}

    @app.get("/v1/testing/endpoints/{registration_id}/delivered")
    def delivered(registration_id: str):
        return service.delivered(registration_id)

    @app.post("/v1/testing/tick")
    def tick(body: TickIn = Body(TickIn())):
        now = _ts_param(body.now, "now") if body.now else None
        attempts = service.tick(now)
        return {"attempts": len(attempts)}

    @app.get("/v1/testing/jobs")
    def jobs():
        return service.dispatcher.to_dict()["jobs"]

    return app

