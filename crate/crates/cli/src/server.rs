//! HTTP inference service.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use eyewear_core::config::BackboneSource;
use eyewear_core::data::preset_masks;
use eyewear_core::inference::{encode_base64, EditOptions, EditRequest, EditResponse, Editor};
use eyewear_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

pub struct ErrorResponse(StatusCode, ApiError);

impl ErrorResponse {
    fn new(status: StatusCode, code: &str, message: impl ToString) -> Self {
        Self(
            status,
            ApiError {
                code: code.into(),
                message: message.to_string(),
            },
        )
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ErrorResponse {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<Error> for ErrorResponse {
    fn from(e: Error) -> Self {
        match e {
            Error::Decode(_) | Error::Image(_) | Error::Json(_) => Self::new(StatusCode::BAD_REQUEST, "decode_error", e),
            Error::NonBinaryMask(_) | Error::MaskResolution { .. } => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_mask", e)
            }
            Error::InvalidRequest(_) | Error::InvalidFusionWeight(_) => Self::bad_request(e),
            Error::NoFace(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "inversion_failed", e),
            Error::BackboneUnavailable(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "backbone_unavailable", e),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneStatus {
    pub source: BackboneSource,
    pub available: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_manifest: String,
    pub layers: usize,
    pub gamma: f64,
    pub image_resolution: usize,
    pub mask_resolution: usize,
    pub backbones: BackboneStatus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PresetMask {
    pub name: String,
    pub mask: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Presets {
    pub colors: Vec<String>,
    pub styles: Vec<String>,
    pub prompts: Vec<String>,
    pub mask_resolution: usize,
    pub default_masks: Vec<PresetMask>,
}

pub fn router(editor: Arc<Editor>) -> Router {
    Router::new()
        .route("/api/edit", post(edit))
        .route("/api/presets", get(presets))
        .route("/health", get(health))
        .with_state(editor)
}

async fn health(State(ed): State<Arc<Editor>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_manifest: ed.manifest_hash.clone(),
        layers: ed.layers(),
        gamma: ed.gamma.value(),
        image_resolution: ed.resolution(),
        mask_resolution: ed.mask_resolution(),
        backbones: BackboneStatus {
            source: ed.config.backbones.source,
            // Published backbones never load into a running editor.
            available: true,
        },
    })
}

async fn presets(State(ed): State<Arc<Editor>>) -> Result<Json<Presets>, ErrorResponse> {
    let vocab = &ed.config.data.vocabulary;
    let default_masks = preset_masks(ed.mask_resolution())
        .into_iter()
        .map(|(name, m)| {
            Ok(PresetMask {
                name: name.into(),
                mask: encode_base64(&m.to_png_bytes()?),
            })
        })
        .collect::<Result<_, Error>>()?;
    Ok(Json(Presets {
        colors: vocab.colors.clone(),
        styles: vocab.styles.clone(),
        prompts: vocab.prompts(),
        mask_resolution: ed.mask_resolution(),
        default_masks,
    }))
}

async fn read_multipart(mut form: Multipart) -> Result<EditRequest, ErrorResponse> {
    let (mut image, mut mask, mut prompt, mut options) = (None, None, None, EditOptions::default());
    while let Some(field) = form.next_field().await.map_err(ErrorResponse::bad_request)? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(ErrorResponse::bad_request)?;
        match name.as_str() {
            "image" => image = Some(encode_base64(&bytes)),
            "mask" => mask = Some(encode_base64(&bytes)),
            "prompt" => prompt = Some(String::from_utf8_lossy(&bytes).into_owned()),
            "options" => options = serde_json::from_slice(&bytes).map_err(ErrorResponse::bad_request)?,
            _ => {}
        }
    }
    let missing = |f: &str| ErrorResponse::bad_request(format!("missing field `{f}`"));
    Ok(EditRequest {
        image: image.ok_or_else(|| missing("image"))?,
        mask: mask.ok_or_else(|| missing("mask"))?,
        prompt: prompt.ok_or_else(|| missing("prompt"))?,
        options,
    })
}

async fn edit(State(ed): State<Arc<Editor>>, req: Request) -> Result<Json<EditResponse>, ErrorResponse> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let body = if is_multipart {
        let form = Multipart::from_request(req, &()).await.map_err(ErrorResponse::bad_request)?;
        read_multipart(form).await?
    } else {
        let bytes = Bytes::from_request(req, &()).await.map_err(ErrorResponse::bad_request)?;
        serde_json::from_slice::<EditRequest>(&bytes).map_err(ErrorResponse::bad_request)?
    };
    let resp = tokio::task::spawn_blocking(move || ed.handle(&body))
        .await
        .map_err(|e| ErrorResponse::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))??;
    Ok(Json(resp))
}

pub async fn serve(editor: Arc<Editor>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(address = %listener.local_addr()?, "serving");
    axum::serve(listener, router(editor))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
