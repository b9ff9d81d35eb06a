//! Token-selection visualization: standalone HTML and a bracketed text form.
//!
//! Marker A (blue) flags every selected token. Marker B (orange) flags
//! selected tokens that the pure-REL (γ=1) mask at the same ρ would have
//! left out, i.e. tokens kept mainly for their attention score.

use std::fmt::Write as _;

use sstoken_core::corpus::{token_display, TokenId};
use sstoken_core::select::{select_topk, MaskRecord, SelectionMask};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    None,
    A,
    /// Selected, and attention-dominant.
    AB,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub markers: Vec<Marker>,
    /// An HTML fragment for the sample.
    pub html: String,
    /// `[tok]` is selected, `{tok}` is selected and attention-dominant,
    /// bare tokens are unselected.
    pub text: String,
}

impl Rendering {
    pub fn a_count(&self) -> usize {
        self.markers.iter().filter(|m| **m != Marker::None).count()
    }

    pub fn b_count(&self) -> usize {
        self.markers.iter().filter(|m| **m == Marker::AB).count()
    }
}

const STYLE: &str = "body{font-family:monospace;line-height:1.8}\
.tok{padding:1px 2px;margin:0 1px;border-radius:3px}\
.a{background:#9cc3f5}.b{background:#f7b267}\
.sample{margin-bottom:1em}.id{color:#666}";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Per-token markers from the ssToken mask and the pure-REL mask.
pub fn markers(sstoken: &SelectionMask, rel_only: &SelectionMask) -> Result<Vec<Marker>> {
    if sstoken.len() != rel_only.len() {
        return Err(LabError::Invalid(format!(
            "mask lengths differ: {} vs {}",
            sstoken.len(),
            rel_only.len()
        )));
    }
    Ok(sstoken
        .bits
        .iter()
        .zip(&rel_only.bits)
        .map(|(&s, &r)| match (s, r) {
            (false, _) => Marker::None,
            (true, true) => Marker::A,
            (true, false) => Marker::AB,
        })
        .collect())
}

/// Renders one sample's response tokens. `tooltips` optionally annotates
/// each token (for example with its scores).
pub fn render_selection(sample: usize, tokens: &[TokenId], sstoken: &SelectionMask, rel_only: &SelectionMask, tooltips: Option<&[String]>) -> Result<Rendering> {
    if tokens.len() != sstoken.len() {
        return Err(LabError::Invalid(format!("{} tokens vs mask of {}", tokens.len(), sstoken.len())));
    }
    if tooltips.is_some_and(|t| t.len() != tokens.len()) {
        return Err(LabError::Invalid("tooltip count differs from token count".into()));
    }
    let markers = markers(sstoken, rel_only)?;
    let mut html = format!("<div class=\"sample\"><span class=\"id\">#{sample}</span> ");
    let mut text = String::new();
    for (i, (&id, m)) in tokens.iter().zip(&markers).enumerate() {
        let shown = token_display(id);
        let class = match m {
            Marker::None => "tok",
            Marker::A => "tok a",
            Marker::AB => "tok a b",
        };
        let title = tooltips.map(|t| format!(" title=\"{}\"", escape(&t[i]))).unwrap_or_default();
        let _ = write!(html, "<span class=\"{class}\"{title}>{}</span>", escape(&shown));
        match m {
            Marker::None => text.push_str(&shown),
            Marker::A => {
                let _ = write!(text, "[{shown}]");
            }
            Marker::AB => {
                let _ = write!(text, "{{{shown}}}");
            }
        }
    }
    html.push_str("</div>\n");
    Ok(Rendering { markers, html, text })
}

/// Renders an exported ssToken record, recomputing the γ=1 mask from its
/// normalized REL scores.
pub fn render_record(rec: &MaskRecord) -> Result<Rendering> {
    let rel = rec
        .rel_norm()
        .ok_or_else(|| LabError::Invalid(format!("record {} has no REL scores ({} selector)", rec.sample, rec.selector)))?;
    let mask = rec.mask()?;
    let rel_only = select_topk(&rel, rec.rho);
    let tips: Vec<String> = rec
        .triples
        .iter()
        .map(|(f, r, a)| format!("fused={f:.4} rel={:.4} attn={:.4}", r.unwrap_or(f64::NAN), a.unwrap_or(f64::NAN)))
        .collect();
    render_selection(rec.sample, &rec.tokens, &mask, &rel_only, Some(&tips))
}

/// A standalone HTML document for several renderings.
pub fn html_document(title: &str, parts: &[Rendering]) -> String {
    let mut doc = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title><style>{STYLE}</style></head><body>\n<h1>{}</h1>\n\
         <p><span class=\"tok a\">selected</span> <span class=\"tok a b\">selected, attention-dominant</span></p>\n",
        escape(title),
        escape(title)
    );
    for p in parts {
        doc.push_str(&p.html);
    }
    doc.push_str("</body></html>\n");
    doc
}

#[cfg(test)]
mod tests {
    use super::*;
    use sstoken_core::corpus::tokenize;

    fn mask(bits: &str) -> SelectionMask {
        SelectionMask::parse_bits(bits, 0.5).unwrap()
    }

    #[test]
    fn all_selected_has_no_b() {
        let toks = tokenize("abc");
        let r = render_selection(0, &toks, &mask("111"), &mask("111"), None).unwrap();
        assert_eq!(r.a_count(), 3);
        assert_eq!(r.b_count(), 0);
        assert_eq!(r.text, "[a][b][c]");
    }

    #[test]
    fn identical_masks_have_no_b() {
        let toks = tokenize("abcd");
        let r = render_selection(0, &toks, &mask("1010"), &mask("1010"), None).unwrap();
        assert_eq!(r.b_count(), 0);
        assert_eq!(r.text, "[a]b[c]d");
    }

    #[test]
    fn single_attention_dominant_token() {
        let toks = tokenize("abcd");
        let r = render_selection(3, &toks, &mask("1100"), &mask("1001"), None).unwrap();
        assert_eq!(r.b_count(), 1);
        assert_eq!(r.a_count(), 2);
        assert_eq!(r.text, "[a]{b}cd");
        assert_eq!(r.html.matches("tok a b").count(), 1);
    }

    #[test]
    fn html_is_escaped() {
        let toks = tokenize("<&");
        let r = render_selection(0, &toks, &mask("10"), &mask("10"), None).unwrap();
        assert!(r.html.contains("&lt;") && r.html.contains("&amp;"));
        let doc = html_document("t", &[r]);
        assert!(doc.starts_with("<!DOCTYPE html>"));
    }

    #[test]
    fn length_mismatch() {
        let toks = tokenize("ab");
        assert!(render_selection(0, &toks, &mask("1"), &mask("1"), None).is_err());
        assert!(render_selection(0, &toks, &mask("10"), &mask("1"), None).is_err());
    }
}
