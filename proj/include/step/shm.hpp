// User-facing shared data: globals, objects with class layouts, arrays.
//
// Values map onto DSM words: 32-bit integers/floats take one word, 64-bit
// values and object references take two consecutive words (low word first).
// Shared variables live on the virtual object 0; field_ids are assigned in
// declaration order, so identical declaration sequences yield identical
// addresses on every node (enforced by a catalog digest at init).
//
// Reserved field ids at the top of each object's field space:
//   top-1  array element kind     top-2  array length
//   top-16 (object 0 only) the cluster-wide object id allocator counter.
#pragma once

#include <typeinfo>

#include "step/dsm.hpp"

namespace step {

enum class ElemKind : uint8_t { i32 = 0, i64 = 1, f32 = 2, f64 = 3, ref = 4 };

const char* elem_kind_name(ElemKind k);
inline uint32_t elem_width(ElemKind k) {
  return (k == ElemKind::i32 || k == ElemKind::f32) ? 1 : 2;
}
inline uint32_t elem_bytes(ElemKind k) { return elem_width(k) * 4; }

struct ObjRef {
  uint32_t object_id = 0;
  bool null() const { return object_id == 0; }
  friend bool operator==(const ObjRef&, const ObjRef&) = default;
};

template <typename T>
struct ElemTraits;
template <>
struct ElemTraits<int32_t> {
  static constexpr ElemKind kind = ElemKind::i32;
  static void encode(int32_t v, Word* w) { w[0] = std::bit_cast<uint32_t>(v); }
  static int32_t decode(const Word* w) { return std::bit_cast<int32_t>(w[0]); }
};
template <>
struct ElemTraits<float> {
  static constexpr ElemKind kind = ElemKind::f32;
  static void encode(float v, Word* w) { w[0] = std::bit_cast<uint32_t>(v); }
  static float decode(const Word* w) { return std::bit_cast<float>(w[0]); }
};
template <>
struct ElemTraits<int64_t> {
  static constexpr ElemKind kind = ElemKind::i64;
  static void encode(int64_t v, Word* w) {
    uint64_t u = std::bit_cast<uint64_t>(v);
    w[0] = Word(u);
    w[1] = Word(u >> 32);
  }
  static int64_t decode(const Word* w) {
    return std::bit_cast<int64_t>(uint64_t(w[0]) | (uint64_t(w[1]) << 32));
  }
};
template <>
struct ElemTraits<double> {
  static constexpr ElemKind kind = ElemKind::f64;
  static void encode(double v, Word* w) {
    uint64_t u = std::bit_cast<uint64_t>(v);
    w[0] = Word(u);
    w[1] = Word(u >> 32);
  }
  static double decode(const Word* w) {
    return std::bit_cast<double>(uint64_t(w[0]) | (uint64_t(w[1]) << 32));
  }
};
template <>
struct ElemTraits<ObjRef> {
  static constexpr ElemKind kind = ElemKind::ref;
  static void encode(ObjRef v, Word* w) {
    w[0] = v.object_id;
    w[1] = 0;
  }
  static ObjRef decode(const Word* w) { return ObjRef{w[0]}; }
};

// --- layouts and the catalog ---------------------------------------------------

struct FieldDesc {
  std::string name;
  ElemKind kind;
  uint64_t field_id;
};

class ClassLayout {
 public:
  ClassLayout(std::string name, const ClassLayout* parent);

  ClassLayout& field(const std::string& name, ElemKind kind);
  const FieldDesc& find(const std::string& name) const;  // searches parents too
  const std::string& name() const { return name_; }
  uint64_t word_count() const { return next_fid_; }      // contiguous field words
  std::vector<const FieldDesc*> all_fields() const;      // parent fields first

 private:
  std::string name_;
  const ClassLayout* parent_;
  std::vector<FieldDesc> fields_;
  uint64_t next_fid_;
};

template <typename T>
struct Global {
  uint64_t field_id = 0;
};

class Catalog {
 public:
  explicit Catalog(uint32_t address_split_x = 32) : x_(address_split_x) {}

  ClassLayout& define_class(const std::string& name, const std::string& parent = "");
  const ClassLayout& layout(const std::string& name) const;

  template <typename T>
  Global<T> declare_global(const std::string& name) {
    return Global<T>{declare_global_raw(name, ElemTraits<T>::kind)};
  }
  uint64_t declare_global_raw(const std::string& name, ElemKind kind);

  void freeze() { frozen_ = true; }
  uint64_t digest() const;

  uint32_t split_x() const { return x_; }
  uint64_t field_space() const { return x_ == 0 ? 0 : (1ull << (64 - x_)); }
  uint64_t alloc_counter_fid() const { return field_space() - 16; }
  uint64_t array_kind_fid() const { return field_space() - 1; }
  uint64_t array_len_fid() const { return field_space() - 2; }

 private:
  uint32_t x_;
  bool frozen_ = false;
  std::map<std::string, std::unique_ptr<ClassLayout>> classes_;
  std::vector<std::string> class_order_;
  std::vector<FieldDesc> globals_;
  uint64_t next_global_fid_ = 0;
};

// --- per-node facade -------------------------------------------------------------

template <typename T>
struct ArrayHandle {
  uint32_t object_id = 0;
  uint32_t length = 0;
  ObjRef ref() const { return ObjRef{object_id}; }
};

class SharedMem {
 public:
  SharedMem(DsmNode& dsm, const Catalog& catalog) : dsm_(dsm), cat_(catalog) {}

  const Catalog& catalog() const { return cat_; }
  DsmNode& dsm() { return dsm_; }

  template <typename T>
  T get(const Global<T>& g) {
    return read_value<T>(compose_addr(0, g.field_id, cat_.split_x()));
  }
  template <typename T>
  void set(const Global<T>& g, T v) {
    write_value<T>(compose_addr(0, g.field_id, cat_.split_x()), v);
  }

  ObjRef new_object(const ClassLayout& layout);
  void delete_object(ObjRef ref, const ClassLayout& layout);

  template <typename T>
  T get_field(ObjRef ref, const ClassLayout& layout, const std::string& field) {
    const FieldDesc& f = layout.find(field);
    check_kind(f, ElemTraits<T>::kind);
    return read_value<T>(field_addr(ref, f.field_id));
  }
  template <typename T>
  void set_field(ObjRef ref, const ClassLayout& layout, const std::string& field, T v) {
    const FieldDesc& f = layout.find(field);
    check_kind(f, ElemTraits<T>::kind);
    write_value<T>(field_addr(ref, f.field_id), v);
  }

  template <typename T>
  ArrayHandle<T> new_array(uint32_t length) {
    uint32_t oid = allocate_object_id();
    write_array_header(oid, ElemTraits<T>::kind, length);
    return ArrayHandle<T>{oid, length};
  }
  template <typename T>
  void delete_array(const ArrayHandle<T>& h) {
    delete_array_raw(h.object_id, ElemTraits<T>::kind, h.length);
  }
  // Rebuilds a typed handle from a stored reference, via the hidden header.
  template <typename T>
  ArrayHandle<T> array_from_ref(ObjRef ref) {
    auto [kind, len] = read_array_header(ref);
    check(kind == ElemTraits<T>::kind, Errc::layout, "array element kind mismatch");
    return ArrayHandle<T>{ref.object_id, len};
  }

  template <typename T>
  T get_elem(const ArrayHandle<T>& h, uint32_t i) {
    check(i < h.length, Errc::bounds, "array index out of range");
    return read_value<T>(elem_addr(h, i));
  }
  template <typename T>
  void set_elem(const ArrayHandle<T>& h, uint32_t i, T v) {
    check(i < h.length, Errc::bounds, "array index out of range");
    write_value<T>(elem_addr(h, i), v);
  }

  template <typename T>
  void copy_from(const ArrayHandle<T>& h, const T* values, uint32_t start, uint32_t count) {
    check(uint64_t(start) + count <= h.length, Errc::bounds, "copy_from out of range");
    if (count == 0) return;
    uint32_t w = elem_width(ElemTraits<T>::kind);
    std::vector<Word> words(size_t(count) * w);
    for (uint32_t i = 0; i < count; ++i) ElemTraits<T>::encode(values[i], &words[size_t(i) * w]);
    dsm_.write_words(elem_addr(h, start), words);
  }
  template <typename T>
  void copy_to(const ArrayHandle<T>& h, T* out, uint32_t start, uint32_t count) {
    check(uint64_t(start) + count <= h.length, Errc::bounds, "copy_to out of range");
    if (count == 0) return;
    uint32_t w = elem_width(ElemTraits<T>::kind);
    auto words = dsm_.read_words(elem_addr(h, start), count * w);
    for (uint32_t i = 0; i < count; ++i) out[i] = ElemTraits<T>::decode(&words[size_t(i) * w]);
  }

  uint32_t allocate_object_id();
  int64_t allocated_count();  // current value of the allocator counter

 private:
  template <typename T>
  T read_value(Addr a) {
    auto words = dsm_.read_words(a, elem_width(ElemTraits<T>::kind));
    return ElemTraits<T>::decode(words.data());
  }
  template <typename T>
  void write_value(Addr a, T v) {
    std::vector<Word> words(elem_width(ElemTraits<T>::kind));
    ElemTraits<T>::encode(v, words.data());
    dsm_.write_words(a, words);
  }

  Addr field_addr(ObjRef ref, uint64_t fid) const {
    check(!ref.null(), Errc::missing_object, "null reference");
    return compose_addr(ref.object_id, fid, cat_.split_x());
  }
  template <typename T>
  Addr elem_addr(const ArrayHandle<T>& h, uint32_t i) const {
    return compose_addr(h.object_id, uint64_t(i) * elem_width(ElemTraits<T>::kind),
                        cat_.split_x());
  }
  static void check_kind(const FieldDesc& f, ElemKind want) {
    check(f.kind == want, Errc::layout, "field " + f.name + " is " + elem_kind_name(f.kind));
  }

  void write_array_header(uint32_t oid, ElemKind kind, uint32_t length);
  std::pair<ElemKind, uint32_t> read_array_header(ObjRef ref);
  void delete_array_raw(uint32_t oid, ElemKind kind, uint32_t length);
  void check_allocated(uint32_t oid);

  DsmNode& dsm_;
  const Catalog& cat_;
};

}  // namespace step
