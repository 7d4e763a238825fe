#include "step/shm.hpp"

namespace step {

const char* elem_kind_name(ElemKind k) {
  switch (k) {
    case ElemKind::i32: return "i32";
    case ElemKind::i64: return "i64";
    case ElemKind::f32: return "f32";
    case ElemKind::f64: return "f64";
    case ElemKind::ref: return "ref";
  }
  return "?";
}

ClassLayout::ClassLayout(std::string name, const ClassLayout* parent)
    : name_(std::move(name)), parent_(parent), next_fid_(parent ? parent->next_fid_ : 0) {}

ClassLayout& ClassLayout::field(const std::string& name, ElemKind kind) {
  for (const auto& f : fields_) {
    check(f.name != name, Errc::layout, "duplicate field " + name + " in " + name_);
  }
  fields_.push_back(FieldDesc{name, kind, next_fid_});
  next_fid_ += elem_width(kind);
  return *this;
}

const FieldDesc& ClassLayout::find(const std::string& name) const {
  for (const auto& f : fields_) {
    if (f.name == name) return f;
  }
  check(parent_ != nullptr, Errc::layout, "unknown field " + name + " in " + name_);
  return parent_->find(name);
}

std::vector<const FieldDesc*> ClassLayout::all_fields() const {
  std::vector<const FieldDesc*> out;
  if (parent_) out = parent_->all_fields();
  for (const auto& f : fields_) out.push_back(&f);
  return out;
}

ClassLayout& Catalog::define_class(const std::string& name, const std::string& parent) {
  check(!frozen_, Errc::layout, "catalog frozen");
  check(!classes_.count(name), Errc::layout, "duplicate class " + name);
  const ClassLayout* p = parent.empty() ? nullptr : &layout(parent);
  auto cl = std::make_unique<ClassLayout>(name, p);
  ClassLayout& ref = *cl;
  classes_[name] = std::move(cl);
  class_order_.push_back(name);
  return ref;
}

const ClassLayout& Catalog::layout(const std::string& name) const {
  auto it = classes_.find(name);
  check(it != classes_.end(), Errc::layout, "unknown class " + name);
  return *it->second;
}

uint64_t Catalog::declare_global_raw(const std::string& name, ElemKind kind) {
  check(!frozen_, Errc::layout, "catalog frozen");
  for (const auto& g : globals_) {
    check(g.name != name, Errc::layout, "duplicate shared variable " + name);
  }
  uint64_t fid = next_global_fid_;
  next_global_fid_ += elem_width(kind);
  check(next_global_fid_ < alloc_counter_fid(), Errc::range, "shared variable space exhausted");
  globals_.push_back(FieldDesc{name, kind, fid});
  return fid;
}

uint64_t Catalog::digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& cname : class_order_) {
    h = fnv1a_str(cname, h);
    for (const auto* f : classes_.at(cname)->all_fields()) {
      h = fnv1a_str(f->name, h);
      uint8_t k = uint8_t(f->kind);
      h = fnv1a(&k, 1, h);
    }
  }
  for (const auto& g : globals_) {
    h = fnv1a_str(g.name, h);
    uint8_t k = uint8_t(g.kind);
    h = fnv1a(&k, 1, h);
  }
  uint8_t x = uint8_t(x_);
  return fnv1a(&x, 1, h);
}

uint32_t SharedMem::allocate_object_id() {
  Addr counter = compose_addr(0, cat_.alloc_counter_fid(), cat_.split_x());
  int64_t id = dsm_.atomic_inc(counter, 1);
  check(id > 0 && uint64_t(id) < (cat_.split_x() == 64 ? ~0ull : (1ull << cat_.split_x())),
        Errc::range, "object id space exhausted");
  return uint32_t(id);
}

int64_t SharedMem::allocated_count() {
  return dsm_.atomic_read(compose_addr(0, cat_.alloc_counter_fid(), cat_.split_x()));
}

void SharedMem::check_allocated(uint32_t oid) {
  check(oid != 0 && int64_t(oid) <= allocated_count(), Errc::missing_object,
        "object " + std::to_string(oid) + " was never allocated");
}

ObjRef SharedMem::new_object(const ClassLayout&) {
  // Zero-fill semantics make allocation free: drawing a fresh id is enough.
  return ObjRef{allocate_object_id()};
}

void SharedMem::delete_object(ObjRef ref, const ClassLayout& layout) {
  check_allocated(ref.object_id);
  uint64_t words = layout.word_count();
  if (words == 0) return;
  dsm_.erase_range(compose_addr(ref.object_id, 0, cat_.split_x()), uint32_t(words));
}

void SharedMem::write_array_header(uint32_t oid, ElemKind kind, uint32_t length) {
  dsm_.write_words(compose_addr(oid, cat_.array_len_fid(), cat_.split_x()),
                   {Word(length), Word(uint8_t(kind))});
}

std::pair<ElemKind, uint32_t> SharedMem::read_array_header(ObjRef ref) {
  check_allocated(ref.object_id);
  auto words =
      dsm_.read_words(compose_addr(ref.object_id, cat_.array_len_fid(), cat_.split_x()), 2);
  return {ElemKind(uint8_t(words[1])), words[0]};
}

void SharedMem::delete_array_raw(uint32_t oid, ElemKind kind, uint32_t length) {
  check_allocated(oid);
  if (length > 0) {
    dsm_.erase_range(compose_addr(oid, 0, cat_.split_x()), length * elem_width(kind));
  }
  dsm_.erase_range(compose_addr(oid, cat_.array_len_fid(), cat_.split_x()), 2);
}

}  // namespace step
