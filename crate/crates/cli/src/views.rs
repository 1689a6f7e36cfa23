//! View directories: PNG frames plus a `views.json` index.
//!
//! ```json
//! {"views": [{"image": "rgb_000.png", "depth": "depth_000.png",
//!             "camera": {"position": [...], "look_at": [...], "up": [...],
//!                        "vertical_fov": 0.69, "width": 64, "height": 64}}]}
//! ```
//!
//! `render` writes this layout and `generate --target-views` reads it.
//! `depth` is optional.

use std::path::Path;

use blockfield::render::{Camera, Image};
use serde::{Deserialize, Serialize};

use crate::error::{config, runtime, Result};

pub const INDEX: &str = "views.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewIndex {
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    pub camera: Camera,
}

impl ViewIndex {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(runtime)?;
        std::fs::write(dir.join(INDEX), text + "\n").map_err(runtime)
    }
}

/// Cameras and RGB targets from a view directory.
pub fn load_targets(dir: &Path) -> Result<Vec<(Camera, Image)>> {
    let index_path = dir.join(INDEX);
    let text = std::fs::read_to_string(&index_path).map_err(|e| config(format!("{}: {e}", index_path.display())))?;
    let index: ViewIndex = serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", index_path.display())))?;
    if index.views.is_empty() {
        return Err(config(format!("{}: no views", index_path.display())));
    }
    index
        .views
        .into_iter()
        .map(|v| {
            v.camera.validate().map_err(|e| config(format!("{}: {e}", v.image)))?;
            let path = dir.join(&v.image);
            let img = Image::load_png(&path).map_err(|e| config(format!("{}: {e}", path.display())))?;
            if (img.width, img.height) != (v.camera.width, v.camera.height) {
                return Err(config(format!(
                    "{}: image is {}×{} but its camera is {}×{}",
                    path.display(),
                    img.width,
                    img.height,
                    v.camera.width,
                    v.camera.height
                )));
            }
            Ok((v.camera, img))
        })
        .collect()
}
