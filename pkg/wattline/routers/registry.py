from typing import Optional

from fastapi import APIRouter, Depends, HTTPException, Query, Request, status
from pydantic import BaseModel, Field
from sqlalchemy import select
from sqlalchemy.orm import Session

from wattline.core.security import require_basic_auth
from wattline.db.database import get_db
from wattline.db.models import Unit
from wattline.models.workloads import AggregateMetrics, AggregateScope, WorkloadUnit
from wattline.services.registry import aggregate_scope, owns_all

router = APIRouter(dependencies=[Depends(require_basic_auth)])

# ============================================================================
# Response Models
# ============================================================================

class UnitListResponse(BaseModel):
    """Units matching the filters"""
    units: list[WorkloadUnit]
    count: int


class VerifyResponse(BaseModel):
    status: str
    user: str
    uuids: list[str] = Field(default_factory=list)


# ============================================================================
# Endpoints
# ============================================================================

@router.get("/units", response_model=UnitListResponse)
def list_units(
    request: Request,
    user: Optional[str] = None,
    project: Optional[str] = None,
    start: Optional[int] = Query(default=None, description="Window start (ms)"),
    end: Optional[int] = Query(default=None, description="Window end (ms)"),
    db: Session = Depends(get_db),
):
    """List units, optionally filtered by owner, project and overlapping window"""
    query = select(Unit).where(Unit.cluster_id == request.app.state.cluster_id)
    if user is not None:
        query = query.where(Unit.user == user)
    if project is not None:
        query = query.where(Unit.project == project)
    if end is not None:
        query = query.where(Unit.started_at < end)
    if start is not None:
        query = query.where((Unit.ended_at.is_(None)) | (Unit.ended_at > start))
    units = [row.to_model() for row in db.scalars(query.order_by(Unit.id))]
    return UnitListResponse(units=units, count=len(units))


@router.get("/usage/{scope}", response_model=AggregateMetrics)
def usage(
    request: Request,
    scope: AggregateScope,
    key: str,
    start: int = Query(default=0, description="Window start (ms)"),
    end: Optional[int] = Query(default=None, description="Window end (ms)"),
    db: Session = Depends(get_db),
):
    """Aggregate metrics of a unit, user or project over a window"""
    window_end = end if end is not None else 2**62
    if window_end < start:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST, detail="end must not precede start"
        )
    return aggregate_scope(
        scope, key, start, window_end, db, cluster_id=request.app.state.cluster_id
    )


@router.get("/verify", response_model=VerifyResponse)
def verify(
    request: Request,
    user: str,
    uuid: list[str] = Query(...),
    cluster: Optional[str] = None,
    db: Session = Depends(get_db),
):
    """200 when the user owns every listed unit, 403 otherwise"""
    cluster_id = cluster or request.app.state.cluster_id
    if not owns_all(user, cluster_id, uuid, db):
        raise HTTPException(status_code=status.HTTP_403_FORBIDDEN, detail="not-owner")
    return VerifyResponse(status="owner", user=user, uuids=sorted(set(uuid)))
