//! Protocol and Dublin Core types shared by every stage.

pub mod datestamp;
pub mod dc;
pub mod record;
pub mod request;
pub mod response;
pub mod writer;

pub use datestamp::{format_datestamp, parse_datestamp, DatestampError};
pub use dc::{DcContainer, DcElement, DcName, QualifiedProfile};
pub use record::{
    DeletedPolicy, Granularity, MetadataRecord, ProtocolError, ProtocolErrorCode, RecordHeader,
    ResumptionToken,
};
pub use response::{
    parse_list_response, parse_record, parse_response, IdentifyInfo, MetadataFormat, OaiResponse,
    ResponseBody, ResponseError, SetInfo,
};
pub use writer::{record_payload, serialize_record, ResponseWriter};
