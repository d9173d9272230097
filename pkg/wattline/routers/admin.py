from fastapi import APIRouter, Request, Response, status
from fastapi.responses import JSONResponse

router = APIRouter()

DELETE_PATH = "/api/v1/admin/tsdb/delete_series"


@router.post(DELETE_PATH)
async def delete_series(request: Request):
    """
    Series delete for the registry's purge
    Forwarded to every backend so no replica keeps the series
    """
    results = await request.app.state.proxy.broadcast(
        "POST", DELETE_PATH, request.url.query.encode("latin-1")
    )
    failed = [url for url, code in results if not 200 <= code < 300]
    if failed:
        return JSONResponse(
            status_code=status.HTTP_502_BAD_GATEWAY,
            content={"status": "error", "failed_backends": failed},
        )
    return Response(status_code=status.HTTP_204_NO_CONTENT)
