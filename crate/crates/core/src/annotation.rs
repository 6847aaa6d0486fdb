//! Annotation tables, keyframe detection and label normalization.
//!
//! Tables are CSV files with header `frame,subject,sequence,AU<k>...`. Each
//! body row carries one integer intensity in `0..=5` per AU column, or the
//! literal `NA` when the cell is unannotated. Dense tables (every cell
//! annotated) and keyframe-only tables share this schema.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{validation, IoContext, Result, TasError};

/// Largest FACS intensity level.
pub const MAX_INTENSITY: u8 = 5;

const UNANNOTATED: &str = "NA";

/// One cell of an annotation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Value(u8),
    Unannotated,
}

impl Label {
    pub fn value(self) -> Option<u8> {
        match self {
            Label::Value(v) => Some(v),
            Label::Unannotated => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Value(v) => write!(f, "{v}"),
            Label::Unannotated => f.write_str(UNANNOTATED),
        }
    }
}

/// Per-frame, per-AU intensity table for one subject's video sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceAnnotation {
    pub subject_id: String,
    pub sequence_id: String,
    /// Column names, e.g. `AU6`. The position in this list is the AU class index.
    pub au_names: Vec<String>,
    /// Frame numbers as written in the table, strictly increasing.
    pub frames: Vec<u32>,
    /// Frame-major: `cells[row][au_class]`.
    pub cells: Vec<Vec<Label>>,
}

impl SequenceAnnotation {
    pub fn new(
        subject_id: impl Into<String>,
        sequence_id: impl Into<String>,
        au_names: Vec<String>,
        frames: Vec<u32>,
        cells: Vec<Vec<Label>>,
    ) -> Result<Self> {
        let ann = Self {
            subject_id: subject_id.into(),
            sequence_id: sequence_id.into(),
            au_names,
            frames,
            cells,
        };
        ann.validate()?;
        Ok(ann)
    }

    fn validate(&self) -> Result<()> {
        if self.au_names.is_empty() {
            return Err(validation("annotation needs at least one AU column"));
        }
        if self.frames.len() < 2 {
            return Err(validation(format!(
                "sequence {} has {} frames, need at least 2",
                self.sequence_id,
                self.frames.len()
            )));
        }
        if self.frames.len() != self.cells.len() {
            return Err(validation("frame list and cell rows differ in length"));
        }
        if self.frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(validation(format!(
                "sequence {}: frames are not strictly increasing",
                self.sequence_id
            )));
        }
        for row in &self.cells {
            if row.len() != self.au_names.len() {
                return Err(validation("AU class count differs between frames"));
            }
            for cell in row {
                if let Label::Value(v) = cell {
                    if *v > MAX_INTENSITY {
                        return Err(validation(format!("intensity {v} outside [0,5]")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn au_count(&self) -> usize {
        self.au_names.len()
    }

    /// The labels of one AU column in frame order.
    pub fn column(&self, au_class: usize) -> Vec<Label> {
        self.cells.iter().map(|row| row[au_class]).collect()
    }

    /// True when every cell of the column is annotated.
    pub fn is_dense(&self, au_class: usize) -> bool {
        self.cells
            .iter()
            .all(|row| matches!(row[au_class], Label::Value(_)))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("frame,subject,sequence");
        for name in &self.au_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (frame, row) in self.frames.iter().zip(&self.cells) {
            out.push_str(&format!("{frame},{},{}", self.subject_id, self.sequence_id));
            for cell in row {
                out.push(',');
                out.push_str(&cell.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Parses one annotation CSV file.
pub fn parse_annotation_table(path: &Path) -> Result<SequenceAnnotation> {
    let text = fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
    parse_annotation_str(&text, path)
}

/// Parses annotation CSV text; `path` is only used in error messages.
pub fn parse_annotation_str(text: &str, path: &Path) -> Result<SequenceAnnotation> {
    let parse_err = |line: usize, message: String| TasError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty());

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 4 || columns[..3] != ["frame", "subject", "sequence"] {
        return Err(parse_err(
            header_line,
            "header must be `frame,subject,sequence,AU<k>...`".into(),
        ));
    }
    let au_names: Vec<String> = columns[3..].iter().map(|s| s.to_string()).collect();
    for name in &au_names {
        let valid = name
            .strip_prefix("AU")
            .is_some_and(|k| !k.is_empty() && k.chars().all(|c| c.is_ascii_digit()));
        if !valid {
            return Err(parse_err(header_line, format!("bad AU column name `{name}`")));
        }
    }

    let mut subject: Option<String> = None;
    let mut sequence: Option<String> = None;
    let mut frames = Vec::new();
    let mut cells = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(parse_err(
                line_no,
                format!("expected {} fields, found {}", columns.len(), fields.len()),
            ));
        }
        let frame: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad frame number `{}`", fields[0])))?;
        if let Some(&prev) = frames.last() {
            if frame <= prev {
                return Err(parse_err(line_no, "frames must be strictly increasing".into()));
            }
        }
        match &subject {
            None => subject = Some(fields[1].to_string()),
            Some(s) if s != fields[1] => {
                return Err(parse_err(line_no, "subject changes within one table".into()))
            }
            _ => {}
        }
        match &sequence {
            None => sequence = Some(fields[2].to_string()),
            Some(s) if s != fields[2] => {
                return Err(parse_err(line_no, "sequence changes within one table".into()))
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(au_names.len());
        for field in &fields[3..] {
            if *field == UNANNOTATED {
                row.push(Label::Unannotated);
                continue;
            }
            let v: i64 = field
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad intensity `{field}`")))?;
            if !(0..=MAX_INTENSITY as i64).contains(&v) {
                return Err(validation(format!(
                    "{}:{line_no}: intensity {v} outside [0,5]",
                    path.display()
                )));
            }
            row.push(Label::Value(v as u8));
        }
        frames.push(frame);
        cells.push(row);
    }

    let (Some(subject), Some(sequence)) = (subject, sequence) else {
        return Err(parse_err(header_line, "table has no rows".into()));
    };
    SequenceAnnotation::new(subject, sequence, au_names, frames, cells)
}

/// Loads every `*.csv` table in a directory, ordered by file name.
pub fn load_annotation_dir(dir: &Path) -> Result<Vec<SequenceAnnotation>> {
    let entries = fs::read_dir(dir).io_context(|| format!("listing {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry
            .io_context(|| format!("listing {}", dir.display()))?
            .path();
        if path.extension().is_some_and(|e| e == "csv") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(validation(format!("no sequences found in {}", dir.display())));
    }
    paths.iter().map(|p| parse_annotation_table(p)).collect()
}

/// Maps a FACS level onto `[0,1]`.
pub fn normalize_label(v: u8) -> Result<f64> {
    if v > MAX_INTENSITY {
        return Err(validation(format!("intensity {v} outside [0,5]")));
    }
    Ok(f64::from(v) / f64::from(MAX_INTENSITY))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyframeKind {
    Peak,
    Valley,
    Boundary,
}

/// Keyframe positions of one AU within a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyframeIndex {
    pub au_class: usize,
    /// Row positions into the sequence, strictly increasing.
    pub frame_indices: Vec<usize>,
    pub kinds: Vec<KeyframeKind>,
}

impl KeyframeIndex {
    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }
}

/// Finds peaks and valleys of an integer intensity series.
///
/// Both endpoints are always reported as `Boundary`. A flat run that forms a
/// local extremum is reported at its first frame; flat runs inside a monotone
/// stretch are not extrema.
pub fn detect_keyframes(au_class: usize, series: &[u8]) -> Result<KeyframeIndex> {
    if series.len() < 2 {
        return Err(validation("keyframe detection needs at least 2 frames"));
    }
    if let Some(v) = series.iter().find(|&&v| v > MAX_INTENSITY) {
        return Err(validation(format!("intensity {v} outside [0,5]")));
    }

    // Runs of equal values as (start, value).
    let mut runs: Vec<(usize, u8)> = Vec::new();
    for (i, &v) in series.iter().enumerate() {
        if runs.last().is_none_or(|&(_, last)| last != v) {
            runs.push((i, v));
        }
    }

    let last = series.len() - 1;
    let mut frame_indices = vec![0];
    let mut kinds = vec![KeyframeKind::Boundary];
    // The first and last runs touch the sequence endpoints and never count.
    for w in runs.windows(3) {
        let (prev, (start, v), next) = (w[0].1, w[1], w[2].1);
        let kind = if v > prev && v > next {
            KeyframeKind::Peak
        } else if v < prev && v < next {
            KeyframeKind::Valley
        } else {
            continue;
        };
        frame_indices.push(start);
        kinds.push(kind);
    }
    frame_indices.push(last);
    kinds.push(KeyframeKind::Boundary);

    Ok(KeyframeIndex {
        au_class,
        frame_indices,
        kinds,
    })
}

/// Keyframes of one AU column: detected when the column is dense, otherwise
/// the annotated cells themselves.
pub fn resolve_keyframes(ann: &SequenceAnnotation, au_class: usize) -> Result<KeyframeIndex> {
    if au_class >= ann.au_count() {
        return Err(validation(format!("AU class {au_class} out of range")));
    }
    let column = ann.column(au_class);
    if ann.is_dense(au_class) {
        let series: Vec<u8> = column.iter().filter_map(|l| l.value()).collect();
        return detect_keyframes(au_class, &series);
    }

    let annotated: Vec<(usize, u8)> = column
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.value().map(|v| (i, v)))
        .collect();
    let last_row = ann.frame_count() - 1;
    let kinds = annotated
        .iter()
        .enumerate()
        .map(|(k, &(row, v))| {
            if row == 0 || row == last_row {
                return KeyframeKind::Boundary;
            }
            let prev = k.checked_sub(1).map(|p| annotated[p].1);
            let next = annotated.get(k + 1).map(|n| n.1);
            match (prev, next) {
                (Some(p), Some(n)) if v >= p && v >= n => KeyframeKind::Peak,
                (Some(p), Some(n)) if v <= p && v <= n => KeyframeKind::Valley,
                // Pass-through annotations take the direction they are heading to.
                (_, Some(n)) if v > n => KeyframeKind::Peak,
                (_, Some(_)) => KeyframeKind::Valley,
                (Some(p), None) if v > p => KeyframeKind::Peak,
                _ => KeyframeKind::Valley,
            }
        })
        .collect();
    Ok(KeyframeIndex {
        au_class,
        frame_indices: annotated.iter().map(|&(i, _)| i).collect(),
        kinds,
    })
}

/// Fraction of annotated keyframe cells over all frame × AU cells.
pub fn annotation_budget(ann: &SequenceAnnotation, keyframes: &[KeyframeIndex]) -> Result<f64> {
    let total = ann.frame_count() * ann.au_count();
    if total == 0 {
        return Err(validation("empty sequence"));
    }
    let used: usize = keyframes.iter().map(KeyframeIndex::len).sum();
    Ok(used as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeEntry {
    pub frame: u32,
    pub kind: KeyframeKind,
    pub label: u8,
}

/// On-disk keyframe record for one (sequence, AU) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeManifest {
    pub sequence: String,
    pub subject: String,
    pub au_class: usize,
    pub keyframes: Vec<KeyframeEntry>,
}

impl KeyframeManifest {
    pub fn from_index(ann: &SequenceAnnotation, index: &KeyframeIndex) -> Result<Self> {
        let keyframes = index
            .frame_indices
            .iter()
            .zip(&index.kinds)
            .map(|(&row, &kind)| {
                let label = ann.cells[row][index.au_class].value().ok_or_else(|| {
                    validation(format!(
                        "keyframe at frame {} of {} is unannotated",
                        ann.frames[row], ann.sequence_id
                    ))
                })?;
                Ok(KeyframeEntry {
                    frame: ann.frames[row],
                    kind,
                    label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            sequence: ann.sequence_id.clone(),
            subject: ann.subject_id.clone(),
            au_class: index.au_class,
            keyframes,
        })
    }
}

/// Conventional location of a frame image: `<root>/<subject>/<sequence>/<frame:06>.png`.
pub fn frame_path(root: &Path, subject: &str, sequence: &str, frame: u32) -> PathBuf {
    root.join(subject)
        .join(sequence)
        .join(format!("{frame:06}.png"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<SequenceAnnotation> {
        parse_annotation_str(text, Path::new("t.csv"))
    }

    /// Exhaustive scan: index i is an extremum when the nearest differing
    /// values on both sides are both lower (or both higher) and i starts its run.
    fn scan_oracle(series: &[u8]) -> Vec<usize> {
        let n = series.len();
        let mut out = vec![0];
        for i in 1..n - 1 {
            if series[i - 1] == series[i] {
                continue;
            }
            let left = series[i - 1];
            let right = series[i + 1..].iter().find(|&&v| v != series[i]);
            let Some(&right) = right else { continue };
            let end_of_run = series[i..].iter().take_while(|&&v| v == series[i]).count() + i;
            if end_of_run >= n {
                continue;
            }
            if (series[i] > left && series[i] > right) || (series[i] < left && series[i] < right) {
                out.push(i);
            }
        }
        out.push(n - 1);
        out
    }

    #[test]
    fn parses_three_rows() {
        let ann = parse("frame,subject,sequence,AU6\n0,S1,T1,0\n1,S1,T1,1\n2,S1,T1,2\n").unwrap();
        assert_eq!(ann.frame_count(), 3);
        assert_eq!(ann.column(0), vec![Label::Value(0), Label::Value(1), Label::Value(2)]);
        assert_eq!(ann.subject_id, "S1");
    }

    #[test]
    fn sentinel_cells() {
        let ann = parse("frame,subject,sequence,AU1,AU2\n0,S,Q,NA,3\n5,S,Q,2,NA\n").unwrap();
        assert_eq!(ann.cells[0][0], Label::Unannotated);
        assert_eq!(ann.cells[1][1], Label::Unannotated);
        assert!(!ann.is_dense(0));
    }

    #[test]
    fn out_of_range_intensity_is_validation_error() {
        let err = parse("frame,subject,sequence,AU6\n0,S1,T1,7\n1,S1,T1,1\n").unwrap_err();
        assert!(matches!(err, TasError::Validation(_)), "{err}");
    }

    #[test]
    fn missing_column_names_line() {
        let err =
            parse("frame,subject,sequence,AU6,AU12\n0,S1,T1,0,1\n1,S1,T1,1\n2,S1,T1,1,1\n")
                .unwrap_err();
        match err {
            TasError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_non_increasing_frames_and_bad_header() {
        assert!(parse("frame,subject,sequence,AU6\n1,S,T,0\n1,S,T,1\n").is_err());
        assert!(parse("frame,subj,sequence,AU6\n0,S,T,0\n1,S,T,1\n").is_err());
        assert!(parse("frame,subject,sequence,X6\n0,S,T,0\n1,S,T,1\n").is_err());
        assert!(parse("frame,subject,sequence,AU6\n0,S,T,0\n").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let text = "frame,subject,sequence,AU1,AU2\n0,S,Q,NA,3\n5,S,Q,2,NA\n";
        let ann = parse(text).unwrap();
        assert_eq!(ann.to_csv_string(), text);
    }

    #[test]
    fn keyframes_simple_peak() {
        let k = detect_keyframes(0, &[0, 1, 2, 1, 0]).unwrap();
        assert_eq!(k.frame_indices, scan_oracle(&[0, 1, 2, 1, 0]));
        assert_eq!(k.frame_indices, vec![0, 2, 4]);
        assert_eq!(
            k.kinds,
            vec![KeyframeKind::Boundary, KeyframeKind::Peak, KeyframeKind::Boundary]
        );
    }

    #[test]
    fn keyframes_plateau_first_frame() {
        let k = detect_keyframes(0, &[0, 2, 2, 1]).unwrap();
        assert_eq!(k.frame_indices, scan_oracle(&[0, 2, 2, 1]));
        assert_eq!(k.frame_indices, vec![0, 1, 3]);
        assert_eq!(k.kinds[1], KeyframeKind::Peak);
    }

    #[test]
    fn keyframes_constant_series() {
        let k = detect_keyframes(0, &[3, 3, 3]).unwrap();
        assert_eq!(k.frame_indices, vec![0, 2]);
        assert!(k.kinds.iter().all(|&k| k == KeyframeKind::Boundary));
    }

    #[test]
    fn keyframes_reject_bad_input() {
        assert!(detect_keyframes(0, &[1]).is_err());
        assert!(detect_keyframes(0, &[1, 6]).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_label(0).unwrap(), 0.0);
        assert_eq!(normalize_label(5).unwrap(), 1.0);
        assert_eq!(normalize_label(2).unwrap(), 0.4);
        assert!(normalize_label(6).is_err());
        let image: Vec<f64> = (0..=5).map(|v| normalize_label(v).unwrap()).collect();
        assert_eq!(image, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    }

    fn dense(frames: usize, aus: usize) -> SequenceAnnotation {
        SequenceAnnotation::new(
            "S",
            "Q",
            (0..aus).map(|k| format!("AU{k}")).collect(),
            (0..frames as u32).collect(),
            vec![vec![Label::Value(1); aus]; frames],
        )
        .unwrap()
    }

    #[test]
    fn budget_ratios() {
        let two = |au| KeyframeIndex {
            au_class: au,
            frame_indices: vec![0, 99],
            kinds: vec![KeyframeKind::Boundary; 2],
        };
        let one_au = dense(100, 1);
        assert!((annotation_budget(&one_au, &[two(0)]).unwrap() - 0.02).abs() < 1e-12);
        let two_au = dense(100, 2);
        assert!((annotation_budget(&two_au, &[two(0), two(1)]).unwrap() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn sparse_column_keyframes() {
        let ann = parse(
            "frame,subject,sequence,AU1\n0,S,Q,0\n1,S,Q,NA\n2,S,Q,4\n3,S,Q,NA\n4,S,Q,1\n5,S,Q,NA\n6,S,Q,3\n",
        )
        .unwrap();
        let k = resolve_keyframes(&ann, 0).unwrap();
        assert_eq!(k.frame_indices, vec![0, 2, 4, 6]);
        assert_eq!(
            k.kinds,
            vec![
                KeyframeKind::Boundary,
                KeyframeKind::Peak,
                KeyframeKind::Valley,
                KeyframeKind::Boundary
            ]
        );
        let manifest = KeyframeManifest::from_index(&ann, &k).unwrap();
        let json = serde_json::to_string(&manifest).unwrap();
        assert_eq!(
            json,
            r#"{"sequence":"Q","subject":"S","au_class":0,"keyframes":[{"frame":0,"kind":"boundary","label":0},{"frame":2,"kind":"peak","label":4},{"frame":4,"kind":"valley","label":1},{"frame":6,"kind":"boundary","label":3}]}"#
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn keyframes_match_scan_and_bound_monotone_spans(series in prop::collection::vec(0u8..=5, 2..40)) {
                let k = detect_keyframes(0, &series).unwrap();
                prop_assert_eq!(&k.frame_indices, &scan_oracle(&series));
                prop_assert_eq!(k.frame_indices[0], 0);
                prop_assert_eq!(*k.frame_indices.last().unwrap(), series.len() - 1);
                for w in k.frame_indices.windows(2) {
                    let span = &series[w[0]..=w[1]];
                    let up = span.windows(2).all(|p| p[0] <= p[1]);
                    let down = span.windows(2).all(|p| p[0] >= p[1]);
                    prop_assert!(up || down);
                    let inner = detect_keyframes(0, span).unwrap();
                    prop_assert_eq!(inner.frame_indices.len(), 2);
                }
                let interior = &k.kinds[1..k.kinds.len() - 1];
                for w in interior.windows(2) {
                    prop_assert_ne!(w[0], w[1]);
                }
            }

            #[test]
            fn budget_in_unit_interval(series in prop::collection::vec(0u8..=5, 2..40)) {
                let n = series.len();
                let ann = SequenceAnnotation::new(
                    "S", "Q", vec!["AU1".into()], (0..n as u32).collect(),
                    series.iter().map(|&v| vec![Label::Value(v)]).collect(),
                ).unwrap();
                let k = resolve_keyframes(&ann, 0).unwrap();
                let b = annotation_budget(&ann, &[k]).unwrap();
                prop_assert!(b > 0.0 && b <= 1.0);
            }
        }
    }
}
