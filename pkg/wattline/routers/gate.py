import logging
from urllib.parse import parse_qs

from fastapi import APIRouter, Depends, Request, Response, status
from fastapi.responses import JSONResponse

from wattline.core.exceptions import BackendUnavailableError, InspectionError
from wattline.core.security import require_basic_auth
from wattline.services.gate import USER_HEADER, authorize
from wattline.services.selectors import extract_workload_ids

logger = logging.getLogger(__name__)

router = APIRouter()

QUERY_PATHS = ("/api/v1/query", "/api/v1/query_range")
FORM_TYPE = "application/x-www-form-urlencoded"


def _error(status_code: int, error_type: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status_code,
        content={"status": "error", "errorType": error_type, "error": message},
    )


def _query_values(request: Request, body: bytes) -> list[str]:
    values = request.query_params.getlist("query")
    content_type = request.headers.get("content-type", "")
    if request.method == "POST" and content_type.startswith(FORM_TYPE):
        values += parse_qs(body.decode("utf-8", errors="replace"), keep_blank_values=True).get("query", [])
    return values


async def proxy_query(request: Request) -> Response:
    """
    Query endpoint
    Inspect → authorize → select backend → forward verbatim → relay
    """
    state = request.app.state
    body = await request.body()
    if body and not request.headers.get("content-type", "").startswith(FORM_TYPE):
        return _error(status.HTTP_415_UNSUPPORTED_MEDIA_TYPE, "bad_data", f"body must be {FORM_TYPE}")
    values = _query_values(request, body)
    # the backend must evaluate exactly the query that was inspected
    if len(values) != 1 or not values[0]:
        return _error(status.HTTP_400_BAD_REQUEST, "bad_data", "expected exactly one query parameter")
    query = values[0]

    try:
        inspection = extract_workload_ids(query, state.id_label)
    except InspectionError as e:
        return _error(status.HTTP_400_BAD_REQUEST, "bad_data", str(e))

    user = request.headers.get(USER_HEADER)
    decision = await authorize(user, inspection, state.ownership, state.metric_allowlist)
    if not decision.allowed:
        logger.info("🚫 Denied query for user=%s: %s", user or "<none>", decision.reason)
        return JSONResponse(
            status_code=decision.status_code,
            content={"status": "error", "errorType": "forbidden", "reason": decision.reason.value},
        )

    try:
        proxied = await state.proxy.forward(
            request.method,
            request.url.path,
            request.url.query.encode("latin-1"),
            body,
            dict(request.headers),
        )
    except BackendUnavailableError as e:
        return _error(status.HTTP_503_SERVICE_UNAVAILABLE, "unavailable", str(e))
    return Response(
        content=proxied.content,
        status_code=proxied.status_code,
        headers=proxied.headers,
    )


for path in QUERY_PATHS:
    router.add_api_route(
        path,
        proxy_query,
        methods=["GET", "POST"],
        dependencies=[Depends(require_basic_auth)],
        include_in_schema=False,
    )


@router.get("/-/backends", tags=["Health"])
async def backends(request: Request):
    """Backend health and in-flight counts"""
    return {"backends": request.app.state.pool.snapshot()}
