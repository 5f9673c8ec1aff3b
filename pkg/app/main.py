from __future__ import annotations

from fastapi import FastAPI, HTTPException

from app.rcrn.errors import ConfigError, FormatError, InputError
from app.rcrn.service import ClassifyRequest, ClassifyResponse, ModelSummary, classify_texts, served_model, summarize


app = FastAPI(title="RCRN text classifier")


def _model():
    try:
        return served_model()
    except (ConfigError, FormatError, OSError) as exc:
        raise HTTPException(status_code=503, detail=f"no model loaded: {exc}") from exc


@app.get("/api/model", response_model=ModelSummary)
def api_model():
    return summarize(_model())


@app.post("/api/classify", response_model=ClassifyResponse)
def api_classify(req: ClassifyRequest):
    model = _model()
    try:
        return classify_texts(model, req.texts)
    except InputError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
