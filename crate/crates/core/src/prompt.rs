//! Zero-shot prompt rendering for chat models and extraction of the chosen category.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::CoreError;
use crate::types::{CategorySpace, ReasoningTrace, TraceConfig};

/// Renders the reasoning prompt. `draws` holds `P` patches of `T` `(name, confidence)` pairs.
///
/// The wording (including the "wavform" and "constitues" spellings) is fixed;
/// only clip duration, patch count, patch duration, last patch index and `T`
/// are substituted. Confidences print as integers 0–100: the exact value of
/// `100 * conf` rounded half away from zero.
pub fn build_prompt<S: AsRef<str>>(
    draws: &[Vec<(S, f64)>],
    categories: &CategorySpace,
    cfg: &TraceConfig,
) -> Result<String, CoreError> {
    cfg.validate()?;
    if draws.len() != cfg.patches {
        return Err(CoreError::ShapeMismatch("patch count differs from config"));
    }
    if draws.iter().any(|p| p.len() != cfg.samples_per_patch) {
        return Err(CoreError::ShapeMismatch("samples per patch differ from config"));
    }

    let total_s = (cfg.patches as f64) * f64::from(cfg.patch_ms) / 1000.0;
    let mut out = format!(
        "We take an audio wavform of {total_s} seconds and divide it into {p} patches each of {ms}ms. \
For each of the patch we sample multiple times and list the categories sampled from the distribution. \
For the entire audio waveform, can you predict which category the sound belongs to. \
For predicting the best category DO NOT COUNT or take the MEAN of the predicted categories. \
Rather reason through the category traces from patch 0 to {last} in a sequential manner. \
Reason and take into account what constitues a particular sound, what sub-atoms of a sound an audio is made of \
and draw the correlation from the category labels predicted to what best the sound patch and the entire trace  progression would be. \
Take into account the confidence scores for each patch in the range of 0-100 with 100 being very confident \
and 0 being not at all confident for each of the patches. \
Here are the details of the audio file:  The number of times each patch is sampled: {t}.\n",
        p = cfg.patches,
        ms = cfg.patch_ms,
        last = cfg.patches - 1,
        t = cfg.samples_per_patch,
    );

    for (k, patch) in draws.iter().enumerate() {
        let _ = write!(out, "\nCURRENT PATCH {k}  -- Categories for patch are: ");
        for (i, (name, conf)) in patch.iter().enumerate() {
            let name = name.as_ref();
            let idx = categories
                .index_of(name)
                .ok_or_else(|| CoreError::UnknownCategory(name.to_string()))?;
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{}/{}", categories.name(idx).unwrap_or(name), percent(*conf)?);
        }
        out.push('\n');
    }

    out.push_str("\nLIST OF CATEGORIES GIVEN\n");
    out.push_str(&categories.names().join(", "));
    out.push_str("\n\nFrom the list please pick only one category most likely to be the audio\n");
    Ok(out)
}

/// Prompt for a sampled trace, naming categories from `categories`.
pub fn build_prompt_for_trace(
    trace: &ReasoningTrace,
    categories: &CategorySpace,
) -> Result<String, CoreError> {
    let draws: Vec<Vec<(&str, f64)>> = trace
        .patch_draws()
        .into_iter()
        .map(|patch| {
            patch
                .into_iter()
                .map(|(c, conf)| {
                    categories
                        .name(c)
                        .map(|n| (n, conf))
                        .ok_or(CoreError::LabelOutOfRange {
                            label: c,
                            num_categories: categories.len(),
                        })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    build_prompt(&draws, categories, trace.config())
}

fn percent(conf: f64) -> Result<u32, CoreError> {
    if !(0.0..=1.0).contains(&conf) {
        return Err(CoreError::ConfidenceOutOfRange(conf));
    }
    // Round the exact product, not its f64 approximation: when `conf * 100`
    // lands on a half, the fma residual says which side the true value is on.
    let x = conf * 100.0;
    let r = libm::round(x);
    if (r - x).abs() == 0.5 {
        let residual = libm::fma(conf, 100.0, -x);
        if residual < 0.0 {
            return Ok((r - 1.0) as u32);
        }
    }
    Ok(r as u32)
}

/// Lowercases, turns punctuation, underscores and whitespace runs into single spaces.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Extracts the category a model answered with.
///
/// 1. The last non-empty line, trimmed, equal to a category name ignoring case.
/// 2. Otherwise, the category whose normalized name occurs (on word boundaries)
///    in the normalized response with the latest end position; equal ends go to
///    the longer name, then the lower index.
/// 3. Otherwise [`CoreError::Unparseable`].
pub fn parse_category(response: &str, categories: &CategorySpace) -> Result<usize, CoreError> {
    if let Some(line) = response.lines().map(str::trim).rfind(|l| !l.is_empty()) {
        if let Some(idx) = categories.index_of(line) {
            return Ok(idx);
        }
    }

    let haystack = format!(" {} ", normalize_text(response));
    let mut best: Option<(usize, usize, usize)> = None; // (end, name len, index)
    for (idx, name) in categories.names().iter().enumerate() {
        let norm = normalize_text(name);
        if norm.is_empty() {
            continue;
        }
        let needle = format!(" {norm} ");
        if let Some((start, _)) = haystack.rmatch_indices(needle.as_str()).next() {
            let end = start + needle.len();
            let better = match best {
                None => true,
                Some((b_end, b_len, _)) => end > b_end || (end == b_end && norm.len() > b_len),
            };
            if better {
                best = Some((end, norm.len(), idx));
            }
        }
    }
    best.map(|(_, _, idx)| idx).ok_or(CoreError::Unparseable)
}
