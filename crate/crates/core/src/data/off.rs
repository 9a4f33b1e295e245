//! OFF mesh reader, including the ModelNet quirk where the header keyword
//! and the counts share one line (`OFF490 518 0`).

use super::DataError;

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face].map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cross = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        0.5 * (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt()
    }
}

fn err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        message: message.into(),
    }
}

/// Tokens with their 1-based line numbers, comments and blank lines dropped.
fn meaningful_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let content = line.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        (!tokens.is_empty()).then_some((i + 1, tokens))
    })
}

fn parse_count(line: usize, token: &str, what: &str) -> Result<usize, DataError> {
    token
        .parse::<usize>()
        .map_err(|_| err(line, format!("malformed {what} count {token:?}")))
}

pub fn parse_off(bytes: &[u8]) -> Result<TriangleMesh, DataError> {
    let text = String::from_utf8_lossy(bytes);
    let mut lines = meaningful_lines(&text);

    let (mut line_no, mut tokens) = lines.next().ok_or_else(|| err(1, "empty file"))?;
    if let Some(rest) = tokens[0].strip_prefix("OFF") {
        if rest.is_empty() {
            tokens.remove(0);
        } else {
            tokens[0] = rest;
        }
        if tokens.is_empty() {
            (line_no, tokens) = lines.next().ok_or_else(|| err(line_no + 1, "missing counts line"))?;
        }
    }
    if !(2..=3).contains(&tokens.len()) {
        return Err(err(line_no, format!("counts line needs V F [E], got {} tokens", tokens.len())));
    }
    let num_vertices = parse_count(line_no, tokens[0], "vertex")?;
    let num_faces = parse_count(line_no, tokens[1], "face")?;
    if let Some(edges) = tokens.get(2) {
        parse_count(line_no, edges, "edge")?;
    }

    // Counts are untrusted; cap the up-front allocation.
    let mut vertices = Vec::with_capacity(num_vertices.min(1 << 16));
    for _ in 0..num_vertices {
        let (line, tokens) = lines.next().ok_or_else(|| err(line_no + 1, "unexpected end of file in vertices"))?;
        line_no = line;
        if tokens.len() < 3 {
            return Err(err(line, "vertex needs 3 coordinates"));
        }
        let mut xyz = [0.0; 3];
        for (slot, token) in xyz.iter_mut().zip(&tokens) {
            *slot = token
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("non-numeric coordinate {token:?}")))?;
        }
        vertices.push(xyz);
    }

    let mut faces = Vec::with_capacity(num_faces.min(1 << 16));
    for _ in 0..num_faces {
        let (line, tokens) = lines.next().ok_or_else(|| err(line_no + 1, "unexpected end of file in faces"))?;
        line_no = line;
        let k = parse_count(line, tokens[0], "face vertex")?;
        if k < 3 {
            return Err(err(line, format!("face with {k} vertices")));
        }
        if tokens.len() < k + 1 {
            return Err(err(line, format!("face declares {k} vertices, lists {}", tokens.len() - 1)));
        }
        let mut polygon = Vec::with_capacity(k);
        for token in &tokens[1..=k] {
            let index = token
                .parse::<usize>()
                .map_err(|_| err(line, format!("non-numeric vertex index {token:?}")))?;
            if index >= num_vertices {
                return Err(err(line, format!("vertex index {index} out of range ({num_vertices} vertices)")));
            }
            polygon.push(index);
        }
        for i in 1..k - 1 {
            faces.push([polygon[0], polygon[i], polygon[i + 1]]);
        }
    }
    Ok(TriangleMesh { vertices, faces })
}
