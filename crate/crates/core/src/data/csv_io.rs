use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::schema::Column;
use super::{Dataset, FeatureSchema, ItemRecord, SearchPage, SplitTag};
use crate::error::{Error, Result};

/// Loads a comma-separated click log. Lines starting with `#` are ignored.
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();

    let mut mapping = Vec::with_capacity(headers.len());
    for h in headers.iter() {
        let col = schema
            .column(h)
            .ok_or_else(|| Error::Schema(format!("unexpected column '{h}'")))?;
        if mapping.contains(&col) {
            return Err(Error::Schema(format!("column '{h}' appears twice")));
        }
        mapping.push(col);
    }
    for name in &schema.column_order {
        if !headers.iter().any(|h| h == name) {
            return Err(Error::Schema(format!("missing column '{name}'")));
        }
    }

    let bid_idx = schema.bid_index();
    let pos_idx = schema.position_index();
    let mut groups: BTreeMap<u64, Vec<ItemRecord>> = BTreeMap::new();
    let mut first_seen: Vec<u64> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut item = ItemRecord {
            query_id: 0,
            position: 0,
            categorical: vec![0; schema.categorical.len()],
            continuous: vec![0.0; schema.continuous.len()],
            click: false,
            bid: 0.0,
        };
        for (field, col) in rec.iter().zip(&mapping) {
            let bad = |what: &str| Error::Parse {
                row,
                message: format!("{what} value '{field}' in column '{}'", column_name(schema, *col)),
            };
            match *col {
                Column::QueryId => item.query_id = field.parse().map_err(|_| bad("non-integer"))?,
                Column::Label => {
                    item.click = match field {
                        "1" | "1.0" | "true" => true,
                        "0" | "0.0" | "false" => false,
                        _ => return Err(bad("non-binary")),
                    }
                }
                Column::Categorical(i) => {
                    item.categorical[i] = parse_category(field).ok_or_else(|| bad("non-integer"))?
                }
                Column::Continuous(i) => {
                    let v: f64 = field.parse().map_err(|_| bad("non-numeric"))?;
                    item.continuous[i] = v;
                }
            }
        }
        item.position = item.categorical[pos_idx];
        item.bid = item.continuous[bid_idx];
        let group = groups.entry(item.query_id).or_default();
        if group.is_empty() {
            first_seen.push(item.query_id);
        }
        group.push(item);
    }

    let mut pages = Vec::with_capacity(first_seen.len());
    for qid in first_seen {
        let mut items = groups.remove(&qid).expect("grouped");
        items.sort_by_key(|i| i.position);
        for w in items.windows(2) {
            if w[0].position == w[1].position {
                return Err(Error::Integrity(format!(
                    "qid={qid} has duplicate position {}",
                    w[0].position
                )));
            }
        }
        pages.push(SearchPage { query_id: qid, items });
    }
    Dataset::new(schema.clone(), pages, SplitTag::Full)
}

fn parse_category(field: &str) -> Option<u32> {
    field.parse::<u32>().ok().or_else(|| {
        // integer-valued floats such as "3.0"
        let v: f64 = field.parse().ok()?;
        (v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64).then_some(v as u32)
    })
}

fn column_name(schema: &FeatureSchema, col: Column) -> &str {
    match col {
        Column::QueryId => &schema.query_id_column,
        Column::Label => &schema.label_column,
        Column::Categorical(i) => &schema.categorical[i].name,
        Column::Continuous(i) => &schema.continuous[i],
    }
}

/// Writes the dataset with the schema's column order. `preamble` lines are
/// emitted first as `#` comments.
pub fn write_csv<W: Write>(dataset: &Dataset, mut writer: W, preamble: &[String]) -> Result<()> {
    for line in preamble {
        writeln!(writer, "# {line}")?;
    }
    let schema = &dataset.schema;
    let cols: Vec<Column> = schema
        .column_order
        .iter()
        .map(|n| schema.column(n).expect("validated schema"))
        .collect();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&schema.column_order)?;
    let mut fields = Vec::with_capacity(cols.len());
    for page in &dataset.pages {
        for item in &page.items {
            fields.clear();
            for col in &cols {
                fields.push(match *col {
                    Column::QueryId => item.query_id.to_string(),
                    Column::Label => u8::from(item.click).to_string(),
                    Column::Categorical(i) => item.categorical[i].to_string(),
                    Column::Continuous(i) => item.continuous[i].to_string(),
                });
            }
            w.write_record(&fields)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>, preamble: &[String]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write_csv(dataset, file, preamble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn small() -> Dataset {
        generate_synthetic(&SyntheticConfig { n_pages: 2, page_len: 30, seed: 3, ..Default::default() })
            .unwrap()
    }

    fn to_string(ds: &Dataset) -> String {
        let mut buf = Vec::new();
        write_csv(ds, &mut buf, &["provenance line".into()]).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn groups_sixty_rows_into_two_pages() {
        let ds = small();
        let text = to_string(&ds);
        assert_eq!(text.lines().count(), 62);
        let back = read_csv(text.as_bytes(), &ds.schema).unwrap();
        assert_eq!(back.pages.len(), 2);
        assert_eq!(back.page_len(), 30);
        assert_eq!(back, ds);
    }

    #[test]
    fn shuffled_rows_are_sorted_by_position() {
        let ds = small();
        let text = to_string(&ds);
        let mut lines: Vec<&str> = text.lines().skip(1).collect();
        let header = lines.remove(0);
        lines.reverse();
        let shuffled = std::iter::once(header).chain(lines).collect::<Vec<_>>().join("\n");
        let back = read_csv(shuffled.as_bytes(), &ds.schema).unwrap();
        let mut expected = ds.clone();
        expected.pages.reverse();
        assert_eq!(back, expected);
    }

    #[test]
    fn duplicate_position_is_an_integrity_error() {
        let mut ds = small();
        ds.pages[0].query_id = 7;
        for it in &mut ds.pages[0].items {
            it.query_id = 7;
        }
        let pos = ds.schema.position_index();
        ds.pages[0].items[1].categorical[pos] = 1;
        let text = to_string(&ds);
        match read_csv(text.as_bytes(), &ds.schema) {
            Err(Error::Integrity(m)) => assert!(m.contains("qid=7"), "{m}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let ds = small();
        let text = to_string(&ds).replace("xn,", "xx,");
        match read_csv(text.as_bytes(), &ds.schema) {
            Err(Error::Schema(m)) => assert!(m.contains("xx") || m.contains("xn"), "{m}"),
            other => panic!("expected schema error, got {other:?}"),
        }
        let header_only: String = to_string(&ds).lines().nth(1).unwrap().replace(",xn", "");
        match read_csv(header_only.as_bytes(), &ds.schema) {
            Err(Error::Schema(m)) => assert!(m.contains("'xn'"), "{m}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_continuous_reports_row() {
        let ds = small();
        let text = to_string(&ds);
        let mut lines: Vec<String> = text.lines().skip(1).map(str::to_string).collect();
        let price_col = ds.schema.column_order.iter().position(|c| c == "price").unwrap();
        let mut fields: Vec<String> = lines[4].split(',').map(str::to_string).collect();
        fields[price_col] = "cheap".into();
        lines[4] = fields.join(",");
        match read_csv(lines.join("\n").as_bytes(), &ds.schema) {
            Err(Error::Parse { row, message }) => {
                assert_eq!(row, 3);
                assert!(message.contains("price"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn variable_page_length_is_rejected() {
        let ds = small();
        let text = to_string(&ds);
        let truncated: Vec<&str> = text.lines().skip(1).take(60).collect();
        assert!(matches!(
            read_csv(truncated.join("\n").as_bytes(), &ds.schema),
            Err(Error::Integrity(_))
        ));
    }
}
