"""FastAPI service exposing propagated certification over HTTP.

Routes
~~~~~~
• GET  /health   liveness probe
• POST /certify  multipart: model file + JSON image -> CertResult
• GET  /cost     bookkeeping counts of explicit cross-pixel tracking
"""

import json
import logging
from typing import List, Literal

from fastapi import FastAPI, File, Form, HTTPException, Query, UploadFile
from pydantic import BaseModel, ConfigDict, ValidationError

from constants.common import APP_TITLE, COVPROP_LOG_LEVEL, COVPROP_LOGGER_NAME, DEFAULT_R_MAX, DEFAULT_SIGMA
from covprop import __version__
from covprop.certify import certify_image
from covprop.cost import bookkeeping_counts
from covprop.errors import CovPropError, ModelFormatError
from covprop.network import load
from models.arrays import FloatArray
from models.configs import BoundConfig
from models.results import BookkeepingRow, CertResult
from schemas.service import IMAGE_PAYLOAD_SCHEMA
from utils.logging_config import configure_logging
from utils.model_helpers import parse_payload

configure_logging(level=COVPROP_LOG_LEVEL)
api_logger = logging.getLogger(COVPROP_LOGGER_NAME)

app = FastAPI(title=APP_TITLE, version=__version__)


### pydantic models ###
class HealthResponse(BaseModel):
    status: Literal["ok"] = "ok"
    version: str = __version__


class ImagePayload(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: FloatArray


### routes ###
@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse()


@app.post("/certify", response_model=CertResult)
async def certify(
    model: UploadFile = File(..., description="Model file in the covprop container format"),
    image: str = Form(..., description='JSON object {"image": [[[...]]]} with shape (H, W, C)'),
    sigma: float = Form(DEFAULT_SIGMA),
    rmax: float = Form(DEFAULT_R_MAX),
) -> CertResult:
    """Propagate moments for one image. 400 for unreadable uploads, 422 for inputs the library rejects."""
    try:
        net = load(await model.read())
    except ModelFormatError as error:
        raise HTTPException(400, f"Unreadable model file: {error}")
    try:
        payload = parse_payload(json.loads(image), ImagePayload, IMAGE_PAYLOAD_SCHEMA, name="image payload")
    except json.JSONDecodeError as error:
        raise HTTPException(400, f"Image field is not valid JSON: {error}")
    except CovPropError as error:
        raise HTTPException(422, str(error))
    try:
        cfg = BoundConfig(r_max=rmax, sigma_in=sigma)
        result = certify_image(net, payload.image, cfg)
    except (ValidationError, CovPropError) as error:
        raise HTTPException(422, str(error))
    api_logger.info("Certified %s: class %d, radius %.4f", model.filename, result.predicted, result.radius)
    return result


@app.get("/cost", response_model=List[BookkeepingRow])
def cost(
    kernel: int = Query(..., ge=2),
    depth: int = Query(..., ge=0),
    mode: Literal["overlap", "no-overlap"] = Query("overlap"),
) -> List[BookkeepingRow]:
    return bookkeeping_counts(kernel, depth, mode)
