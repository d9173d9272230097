from fastapi import APIRouter, Depends, Request, Response

from wattline.core.security import require_basic_auth
from wattline.services.exporter import NodeExporter
from wattline.services.exposition import CONTENT_TYPE, render_exposition

router = APIRouter()


@router.get("/metrics", dependencies=[Depends(require_basic_auth)])
def metrics(request: Request) -> Response:
    """
    Scrape endpoint
    Runs every enabled collector; sync so file reads stay off the event loop
    """
    exporter: NodeExporter = request.app.state.exporter
    return Response(content=render_exposition(exporter.scrape()), media_type=CONTENT_TYPE)
